//! Minimal SVG line charts for training curves and ROC.

use std::fmt::Write as _;

use fundus_core::metrics::RocPoint;
use fundus_core::train::EpochRecord;

pub struct Series<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 64.0;
const MR: f64 = 24.0;
const MT: f64 = 40.0;
const MB: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart over the given ranges. Ranges with zero width are widened.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, x: (f64, f64), y: (f64, f64), series: &[Series]) -> String {
    let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let ((x0, x1), (y0, y1)) = (widen(x), widen(y));
    let px = |v: f64| ML + (v - x0) / (x1 - x0) * (W - ML - MR);
    let py = |v: f64| H - MB - (v - y0) / (y1 - y0) * (H - MT - MB);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    for i in 0..=5 {
        let f = f64::from(i) / 5.0;
        let (vx, vy) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r##"<line x1="{ML}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{vy:.3}</text>"##,
            W - MR,
            ML - 6.0,
            py(vy) + 4.0,
            y = py(vy)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(vx),
            H - MB + 18.0,
            if (x1 - x0) >= 5.0 { format!("{vx:.0}") } else { format!("{vx:.2}") }
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{ML}" y="{MT}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - ML - MR,
        H - MT - MB
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ML + W - MR) / 2.0, H - 14.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (MT + H - MB) / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser.points.iter().map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2"{dash} points="{}"/>"#,
            ser.color,
            pts.join(" ")
        );
        let ly = MT + 16.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" x2="{1}" y1="{ly}" y2="{ly}" stroke="{2}" stroke-width="2"{dash}/><text x="{3}" y="{4}">{5}</text>"#,
            W - MR - 150.0,
            W - MR - 126.0,
            ser.color,
            W - MR - 120.0,
            ly + 4.0,
            escape(ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn loss_chart(epochs: &[EpochRecord]) -> String {
    let xs = (1.0, epochs.len().max(1) as f64);
    let (_, hi) = range(epochs.iter().flat_map(|e| [e.train_loss, e.val_loss]));
    let series = [
        Series { name: "train loss", color: "#1f77b4", points: epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect(), dashed: false },
        Series { name: "validation loss", color: "#d62728", points: epochs.iter().map(|e| (e.epoch as f64, e.val_loss)).collect(), dashed: false },
    ];
    line_chart("Loss", "epoch", "cross-entropy", xs, (0.0, if hi.is_finite() { hi } else { 1.0 }), &series)
}

pub fn accuracy_chart(epochs: &[EpochRecord]) -> String {
    let xs = (1.0, epochs.len().max(1) as f64);
    let series = [
        Series { name: "train accuracy", color: "#1f77b4", points: epochs.iter().map(|e| (e.epoch as f64, e.train_acc)).collect(), dashed: false },
        Series { name: "validation accuracy", color: "#d62728", points: epochs.iter().map(|e| (e.epoch as f64, e.val_acc)).collect(), dashed: false },
    ];
    line_chart("Accuracy", "epoch", "accuracy", xs, (0.0, 1.0), &series)
}

pub fn roc_chart(points: &[RocPoint], auc: f64) -> String {
    let series = [
        Series { name: "chance", color: "#999", points: vec![(0.0, 0.0), (1.0, 1.0)], dashed: true },
        Series { name: "ROC", color: "#d62728", points: points.iter().map(|p| (p.fpr, p.tpr)).collect(), dashed: false },
    ];
    line_chart(&format!("ROC (AUC {auc:.3})"), "false positive rate", "true positive rate", (0.0, 1.0), (0.0, 1.0), &series)
}
