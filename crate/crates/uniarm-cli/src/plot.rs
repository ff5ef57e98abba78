//! Static SVG scatter plots of trade-off fronts.

use uniarm_core::metrics::ParetoPoint;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 340.0;
const MARGIN: f64 = 48.0;

struct Bounds {
    lo: f64,
    hi: f64,
}

fn bounds(values: impl Iterator<Item = f64>) -> Bounds {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if (hi - lo).abs() < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.06 * (hi - lo);
    Bounds {
        lo: lo - pad,
        hi: hi + pad,
    }
}

fn scale(v: f64, b: &Bounds, lo_px: f64, hi_px: f64) -> f64 {
    lo_px + (v - b.lo) / (b.hi - b.lo) * (hi_px - lo_px)
}

fn panel(
    out: &mut String,
    points: &[ParetoPoint],
    dims: (usize, usize),
    origin_x: f64,
    title: &str,
) {
    let (dx, dy) = dims;
    let bx = bounds(points.iter().map(|p| p.q[dx]));
    let by = bounds(points.iter().map(|p| p.q[dy]));
    let x0 = origin_x + MARGIN;
    let x1 = origin_x + PANEL_W - 12.0;
    let y0 = PANEL_H - MARGIN;
    let y1 = 24.0;
    out.push_str(&format!(
        "<line x1='{x0}' y1='{y0}' x2='{x1}' y2='{y0}' stroke='#444'/>\
         <line x1='{x0}' y1='{y0}' x2='{x0}' y2='{y1}' stroke='#444'/>\n"
    ));
    out.push_str(&format!(
        "<text x='{}' y='{}' font-size='12' text-anchor='middle'>{title}</text>\n",
        origin_x + PANEL_W / 2.0,
        14.0
    ));
    out.push_str(&format!(
        "<text x='{}' y='{}' font-size='11' text-anchor='middle'>objective {}</text>\n",
        (x0 + x1) / 2.0,
        PANEL_H - 12.0,
        dx + 1
    ));
    out.push_str(&format!(
        "<text x='{}' y='{}' font-size='11' text-anchor='middle' transform='rotate(-90 {} {})'>objective {}</text>\n",
        origin_x + 14.0,
        (y0 + y1) / 2.0,
        origin_x + 14.0,
        (y0 + y1) / 2.0,
        dy + 1
    ));
    for p in points {
        let cx = scale(p.q[dx], &bx, x0, x1);
        let cy = scale(p.q[dy], &by, y0, y1);
        let alpha: Vec<String> = p
            .alpha
            .components()
            .iter()
            .map(|a| format!("{a:.2}"))
            .collect();
        out.push_str(&format!(
            "<circle cx='{cx:.2}' cy='{cy:.2}' r='4' fill='#2266cc' fill-opacity='0.8'>\
             <title>alpha=({}) q=({})</title></circle>\n",
            alpha.join(","),
            p.q.iter()
                .map(|q| format!("{q:.4}"))
                .collect::<Vec<_>>()
                .join(",")
        ));
    }
}

/// One scatter for two objectives; three pairwise projections for three.
pub fn pareto_svg(points: &[ParetoPoint], k: usize, label: &str) -> String {
    let panels: Vec<(usize, usize)> = match k {
        2 => vec![(0, 1)],
        _ => vec![(0, 1), (0, 2), (1, 2)],
    };
    let width = PANEL_W * panels.len() as f64;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns='http://www.w3.org/2000/svg' width='{width}' height='{PANEL_H}' \
         viewBox='0 0 {width} {PANEL_H}'>\n<rect width='100%' height='100%' fill='white'/>\n"
    ));
    for (i, dims) in panels.iter().enumerate() {
        let title = if panels.len() == 1 {
            label.to_string()
        } else {
            format!("{label} (obj {} vs {})", dims.0 + 1, dims.1 + 1)
        };
        panel(
            &mut out,
            points,
            *dims,
            PANEL_W * i as f64,
            &title,
        );
    }
    out.push_str("</svg>\n");
    out
}

/// CSV companion to the plot: alpha components then reward components.
pub fn pareto_csv(points: &[ParetoPoint], k: usize) -> String {
    let mut out = String::new();
    let alpha_cols: Vec<String> = (0..k).map(|i| format!("alpha_{i}")).collect();
    let q_cols: Vec<String> = (0..k).map(|i| format!("q_{i}")).collect();
    out.push_str(&format!("{},{}\n", alpha_cols.join(","), q_cols.join(",")));
    for p in points {
        let alpha: Vec<String> = p.alpha.components().iter().map(|a| a.to_string()).collect();
        let q: Vec<String> = p.q.iter().map(|q| q.to_string()).collect();
        out.push_str(&format!("{},{}\n", alpha.join(","), q.join(",")));
    }
    out
}
