//! Hand-emitted SVG reports: group scatter plots, latency bars, and
//! locality bars. No plotting dependency; plain shapes and text.

use crate::bench::BenchRow;
use crate::partition::PlanCsvRow;

const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac", "#2f4b7c", "#d45087",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    fn new(width: f64, height: f64) -> Svg {
        Svg { width, height, body: String::new() }
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        self.body.push_str(&format!(
            "  <circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r:.2}\" fill=\"{fill}\"/>\n"
        ));
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        self.body.push_str(&format!(
            "  <rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>\n"
        ));
    }

    fn text(&mut self, x: f64, y: f64, size: f64, content: &str) {
        self.body.push_str(&format!(
            "  <text x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"{size}\" font-family=\"sans-serif\">{}</text>\n",
            xml_escape(content)
        ));
    }

    fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" \
             width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{body}</svg>\n",
            w = self.width,
            h = self.height,
            body = self.body
        )
    }
}

/// Bird's-eye scatter of a partition plan: one marker per valid token,
/// colored by group id.
pub fn scatter_groups_svg(rows: &[PlanCsvRow], title: &str) -> String {
    let (size, margin) = (820.0, 30.0);
    let mut svg = Svg::new(size, size);
    svg.text(margin, margin - 10.0, 14.0, title);

    let valid: Vec<&PlanCsvRow> = rows.iter().filter(|r| r.valid == 1).collect();
    if valid.is_empty() {
        return svg.finish();
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &valid {
        min_x = min_x.min(r.x);
        max_x = max_x.max(r.x);
        min_y = min_y.min(r.y);
        max_y = max_y.max(r.y);
    }
    let span = (max_x - min_x).max(max_y - min_y).max(1e-9);
    let scale = (size - 2.0 * margin) / span;

    for r in &valid {
        let x = margin + (r.x - min_x) * scale;
        // SVG y grows downward; flip so +y points up like the scene.
        let y = size - margin - (r.y - min_y) * scale;
        let color = PALETTE[(r.group_id as usize) % PALETTE.len()];
        svg.circle(x, y, 2.0, color);
    }
    svg.finish()
}

fn bars(
    items: &[(String, f64)],
    value_label: &str,
    title: &str,
    fmt: impl Fn(f64) -> String,
) -> String {
    let bar_h = 24.0;
    let gap = 8.0;
    let (width, margin, label_w) = (860.0, 30.0, 240.0);
    let height = margin * 2.0 + 20.0 + items.len() as f64 * (bar_h + gap);
    let mut svg = Svg::new(width, height);
    svg.text(margin, margin - 6.0, 14.0, title);

    let max_v = items.iter().map(|(_, v)| *v).fold(f64::EPSILON, f64::max);
    let avail = width - margin * 2.0 - label_w - 90.0;
    for (i, (label, v)) in items.iter().enumerate() {
        let y = margin + 20.0 + i as f64 * (bar_h + gap);
        let w = (v / max_v) * avail;
        svg.text(margin, y + bar_h - 7.0, 12.0, label);
        svg.rect(margin + label_w, y, w.max(1.0), bar_h, PALETTE[i % PALETTE.len()]);
        svg.text(margin + label_w + w + 6.0, y + bar_h - 7.0, 12.0, &fmt(*v));
    }
    svg.text(margin + label_w, height - 8.0, 11.0, value_label);
    svg.finish()
}

/// One bar per report row, sized by median wall time.
pub fn latency_bars_svg(rows: &[BenchRow], title: &str) -> String {
    let items: Vec<(String, f64)> = rows
        .iter()
        .map(|r| (format!("{} / {}", r.label, r.stage), r.median_ns as f64 / 1e6))
        .collect();
    bars(&items, "median latency (ms)", title, |v| format!("{v:.3} ms"))
}

/// One bar per row carrying a locality score.
pub fn locality_bars_svg(rows: &[BenchRow], title: &str) -> String {
    let items: Vec<(String, f64)> = rows
        .iter()
        .filter_map(|r| r.locality.map(|l| (format!("{} / {}", r.label, r.stage), l)))
        .collect();
    bars(&items, "mean intra-group distance (m)", title, |v| format!("{v:.3} m"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan_rows(n: usize) -> Vec<PlanCsvRow> {
        (0..n)
            .map(|i| PlanCsvRow {
                token_index: i as i64,
                group_id: (i / 4) as u64,
                valid: 1,
                x: (i as f64 * 0.37).sin() * 10.0,
                y: (i as f64 * 0.61).cos() * 10.0,
                z: 0.0,
            })
            .collect()
    }

    #[test]
    fn scatter_has_one_marker_per_token() {
        let rows = plan_rows(57);
        let svg = scatter_groups_svg(&rows, "groups");
        assert!(svg.starts_with("<?xml"));
        assert!(svg.contains("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 57);
    }

    #[test]
    fn scatter_skips_padded_slots() {
        let mut rows = plan_rows(8);
        rows[3].valid = 0;
        let svg = scatter_groups_svg(&rows, "groups");
        assert_eq!(svg.matches("<circle").count(), 7);
    }

    #[test]
    fn latency_bars_escape_labels() {
        let rows = vec![BenchRow {
            label: "a<b>&\"c\"".into(),
            stage: "partition".into(),
            tokens_in: 1,
            tokens_out: 1,
            median_ns: 1_500_000,
            repeats: 5,
            locality: None,
        }];
        let svg = latency_bars_svg(&rows, "latency");
        assert!(svg.contains("a&lt;b&gt;&amp;&quot;c&quot;"));
        assert!(svg.contains("1.500 ms"));
        assert_eq!(svg.matches("<rect").count(), 2); // background + one bar
    }

    #[test]
    fn identical_inputs_give_identical_svg() {
        let rows = plan_rows(20);
        assert_eq!(scatter_groups_svg(&rows, "t"), scatter_groups_svg(&rows, "t"));
    }
}
