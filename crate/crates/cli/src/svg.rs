//! Minimal static SVG plots.

use std::fmt::Write;

#[derive(Clone, Debug, Default)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Join the points with a polyline instead of drawing markers.
    pub line: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
    pub annotation: Option<String>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace("--", "- -")
}

impl Plot {
    fn transform(&self, (x, y): (f64, f64)) -> Option<(f64, f64)> {
        let x = if self.log_x { x.log10() } else { x };
        let y = if self.log_y { y.log10() } else { y };
        (x.is_finite() && y.is_finite()).then_some((x, y))
    }

    /// Renders the plot with `hash` embedded in a provenance comment.
    pub fn render(&self, hash: &str) -> String {
        let pts: Vec<Vec<(f64, f64)>> =
            self.series.iter().map(|s| s.points.iter().filter_map(|&p| self.transform(p)).collect()).collect();
        let all: Vec<(f64, f64)> = pts.iter().flatten().copied().collect();
        let bounds = |f: fn(&(f64, f64)) -> f64| {
            let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            match (lo.is_finite(), hi > lo) {
                (false, _) => (0.0, 1.0),
                (true, false) => (lo - 0.5, lo + 0.5),
                (true, true) => (lo, hi),
            }
        };
        let (x0, x1) = bounds(|p| p.0);
        let (y0, y1) = bounds(|p| p.1);
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">"#);
        let _ = writeln!(out, "<!-- config_sha256={hash} -->");
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(out, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
        let axis = |v: f64, log: bool| if log { format!("1e{v:.2}") } else { format!("{v:.4}") };
        for (v, anchor, x, y) in [
            (x0, "start", l, b + 16.0),
            (x1, "end", r, b + 16.0),
        ] {
            let _ = writeln!(out, r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="11">{}</text>"#, axis(v, self.log_x));
        }
        for (v, y) in [(y0, b), (y1, t)] {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{y}" text-anchor="end" font-size="11">{}</text>"#,
                l - 4.0,
                axis(v, self.log_y)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        );

        for (i, (series, pts)) in self.series.iter().zip(&pts).enumerate() {
            let color = COLORS[i % COLORS.len()];
            if series.line {
                let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
                    path.join(" ")
                );
            } else {
                for &(x, y) in pts {
                    let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, sx(x), sy(y));
                }
            }
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
                r - 150.0,
                t + 14.0 * (i as f64 + 1.0),
                escape(&series.name)
            );
        }
        if let Some(note) = &self.annotation {
            let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, l + 10.0, t + 14.0, escape(note));
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_plot_has_axes_and_hash() {
        let svg = Plot { title: "empty".into(), ..Default::default() }.render("abc");
        assert!(svg.contains("config_sha256=abc"));
        assert!(svg.contains("<path"));
        assert!(!svg.contains("<circle"));
    }

    #[test]
    fn log_axes_drop_nonpositive_points() {
        let plot = Plot {
            log_y: true,
            series: vec![Series { name: "s".into(), points: vec![(1.0, 0.0), (2.0, 1.0), (3.0, 10.0)], line: false }],
            ..Default::default()
        };
        assert_eq!(plot.render("h").matches("<circle").count(), 2);
    }

    #[test]
    fn comments_cannot_be_broken_by_labels() {
        let plot = Plot { title: "a --> b".into(), ..Default::default() };
        assert!(!plot.render("h").contains("a -->"));
    }
}
