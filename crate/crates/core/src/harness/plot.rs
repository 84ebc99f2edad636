use std::fmt::Write as _;

use super::EpochLog;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

/// Training loss (and validation accuracy when present) per epoch as a
/// standalone SVG document.
pub fn loss_curve_svg(epochs: &[EpochLog]) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );

    let n = epochs.len().max(2) as f64 - 1.0;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n;
    let max_loss = epochs.iter().map(|e| e.train_loss).fold(f64::MIN_POSITIVE, f64::max);
    let y = |v: f64, top: f64| H - PAD - (H - 2.0 * PAD) * (v / top).clamp(0.0, 1.0);

    let series = |values: Vec<(usize, f64)>, top: f64| -> String {
        values
            .iter()
            .enumerate()
            .map(|(k, &(i, v))| format!("{}{:.2} {:.2}", if k == 0 { "M" } else { " L" }, x(i), y(v, top)))
            .collect()
    };
    let loss: Vec<(usize, f64)> = epochs.iter().enumerate().map(|(i, e)| (i, e.train_loss)).collect();
    if !loss.is_empty() {
        let _ = writeln!(
            svg,
            r##"<path d="{}" stroke="#1f77b4" stroke-width="2" fill="none"/>"##,
            series(loss, max_loss)
        );
    }
    let acc: Vec<(usize, f64)> = epochs
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.val.as_ref().map(|m| (i, m.accuracy)))
        .collect();
    if !acc.is_empty() {
        let _ = writeln!(
            svg,
            r##"<path d="{}" stroke="#d62728" stroke-width="2" stroke-dasharray="6 4" fill="none"/>"##,
            series(acc, 1.0)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="12">train loss (max {max_loss:.3}, solid); val accuracy (dashed, 0..1)</text>"#,
        PAD - 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end">epoch {}</text>"#,
        W - PAD,
        H - PAD + 20.0,
        epochs.len()
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed() {
        let epochs: Vec<EpochLog> = (1..=3)
            .map(|e| EpochLog {
                epoch: e,
                train_loss: 1.0 / e as f64,
                val: None,
                seconds: 0.0,
            })
            .collect();
        let svg = loss_curve_svg(&epochs);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<path").count(), 2);
        assert!(loss_curve_svg(&[]).contains("</svg>"));
    }
}
