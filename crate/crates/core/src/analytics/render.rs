use std::fmt::Write;

use super::BiasReport;

/// Per-bin table: observed count, expected probability, observed fraction
/// and their ratio (empty where the expectation is zero).
pub fn bias_csv(report: &BiasReport) -> String {
    let h = &report.histogram;
    let frac = h.observed_fraction();
    let mut out = String::from("bin,lower,upper,observed,expected,observed_fraction,o_over_e\n");
    for (i, label) in h.bin_labels.iter().enumerate() {
        let upper = if i + 2 == h.bin_edges.len() {
            String::new()
        } else {
            h.bin_edges[i + 1].to_string()
        };
        let ratio = if h.expected[i] > 0.0 {
            format!("{:.6}", frac[i] / h.expected[i])
        } else {
            String::new()
        };
        let _ = writeln!(
            out,
            "{label},{},{upper},{},{:.6},{:.6},{ratio}",
            h.bin_edges[i], h.observed[i], h.expected[i], frac[i]
        );
    }
    out
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 40.0;

/// Side-by-side bar charts, one panel per report: black bars for observed
/// counts and hatched bars for the counts expected from the area
/// distribution.
pub fn bias_svg(reports: &[BiasReport]) -> String {
    let width = MARGIN + reports.len().max(1) as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.5 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    s.push_str(
        r#"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><line x1="0" y1="0" x2="0" y2="6" stroke="black" stroke-width="1.5"/></pattern></defs>"#,
    );
    s.push('\n');
    for (k, r) in reports.iter().enumerate() {
        let h = &r.histogram;
        let n = h.observed.iter().sum::<u64>() as f64;
        let expected: Vec<f64> = h.expected.iter().map(|e| e * n).collect();
        let max = h
            .observed
            .iter()
            .map(|&o| o as f64)
            .chain(expected.iter().copied())
            .fold(1.0, f64::max);
        let x0 = MARGIN + k as f64 * (PANEL_W + MARGIN);
        let y0 = 1.5 * MARGIN;
        let bins = h.observed.len().max(1) as f64;
        let slot = PANEL_W / bins;
        let bar = slot * 0.38;
        let _ = writeln!(
            s,
            r#"<text x="{x0}" y="{}" font-size="13">{} (n={}, D_KL={:.3})</text>"#,
            y0 - 12.0,
            r.selection,
            r.n_items,
            r.d_kl
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y}" x2="{}" y2="{y}" stroke="black"/>"#,
            x0 + PANEL_W,
            y = y0 + PANEL_H
        );
        for (i, label) in h.bin_labels.iter().enumerate() {
            let bx = x0 + i as f64 * slot + slot * 0.1;
            let oh = PANEL_H * h.observed[i] as f64 / max;
            let eh = PANEL_H * expected[i] / max;
            let _ = writeln!(
                s,
                r#"<rect x="{bx:.2}" y="{:.2}" width="{bar:.2}" height="{oh:.2}" fill="black"/>"#,
                y0 + PANEL_H - oh
            );
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{bar:.2}" height="{eh:.2}" fill="url(#hatch)" stroke="black"/>"#,
                bx + bar,
                y0 + PANEL_H - eh
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="9">{label}</text>"#,
                bx + bar,
                y0 + PANEL_H + 14.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">thermal inertia (tiu)</text>"#,
            x0 + PANEL_W / 2.0,
            y0 + PANEL_H + 32.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::bias_report_with_expected;
    use crate::candidates::TiBins;

    #[test]
    fn csv_rows_per_bin() {
        let r = bias_report_with_expected(&[50.0, 950.0], &TiBins::default(), &[0.1; 10], "top_k")
            .unwrap();
        let csv = bias_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[1], "0-100,0,100,1,0.100000,0.500000,5.000000");
        assert!(lines[10].starts_with("900+,900,,1,"));
    }

    #[test]
    fn svg_has_bars_for_each_bin() {
        let r = bias_report_with_expected(&[50.0], &TiBins::default(), &[0.1; 10], "stratified")
            .unwrap();
        let svg = bias_svg(&[r.clone(), r]);
        assert_eq!(svg.matches("fill=\"black\"").count(), 20);
        assert_eq!(svg.matches("url(#hatch)").count(), 20);
        assert!(svg.contains("D_KL=2.303"));
    }
}
