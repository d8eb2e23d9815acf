//! Static SVG plots: XY trajectory overlays and per-length error bars.

use super::Trajectory;

const W: f64 = 640.0;
const H: f64 = 640.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Top-down (x, y) overlay of one or more trajectories.
pub fn trajectory_svg(named: &[(&str, &Trajectory)]) -> String {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for (_, traj) in named {
        for p in traj.positions() {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
    }
    if !min[0].is_finite() {
        min = [0.0; 2];
        max = [1.0; 2];
    }
    let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-9);
    let sx = |x: f64| MARGIN + (x - min[0]) / span * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - min[1]) / span * (H - 2.0 * MARGIN);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#888\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{m}\" y2=\"{t}\" stroke=\"#888\"/>\n\
         <text x=\"{r}\" y=\"{bb}\" font-size=\"12\" text-anchor=\"end\">x [m]</text>\n\
         <text x=\"{mm}\" y=\"{t}\" font-size=\"12\">y [m]</text>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        bb = H - MARGIN + 16.0,
        mm = MARGIN + 4.0,
    ));
    for (i, (name, traj)) in named.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = traj
            .positions()
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1])))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            W - MARGIN - 120.0,
            MARGIN + 16.0 * (i as f64 + 1.0),
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Bar chart of per-subsequence-length translational and rotational errors,
/// rows of `(length_m, t_rel_pct, r_rel_deg_per_100m, count)`.
pub fn error_bars_svg(per_length: &[(f64, f64, f64, usize)]) -> String {
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    let max_t = per_length
        .iter()
        .map(|r| r.1)
        .fold(1e-9f64, f64::max);
    let n = per_length.len().max(1) as f64;
    let band = (W - 2.0 * MARGIN) / n;
    for (i, (len, t_rel, r_rel, count)) in per_length.iter().enumerate() {
        let x = MARGIN + i as f64 * band;
        let h = (t_rel / max_t) * (H - 2.0 * MARGIN);
        let y = H - MARGIN - h;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"#1f77b4\"/>\n",
            x + band * 0.15,
            band * 0.7,
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{len:.0} m</text>\n",
            x + band * 0.5,
            H - MARGIN + 14.0,
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"middle\">{t_rel:.3}% / {r_rel:.3}deg ({count})</text>\n",
            x + band * 0.5,
            y - 4.0,
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"{}\" font-size=\"12\">translational error per subsequence length</text>\n",
        MARGIN - 20.0,
    ));
    svg.push_str("</svg>\n");
    svg
}
