use std::fmt::Write;

use super::{Arm, FidStudyReport, ShiftStudyReport, CLS_LABEL, MEDI_LABEL, NO_SYN_LABEL};

pub fn render_fid_csv(report: &FidStudyReport) -> String {
    let mut s = String::from("seed,arm,class,fid\n");
    for seed in &report.seeds {
        for (arm, r) in &seed.arms {
            for (c, v) in &r.fid.per_class {
                let _ = writeln!(s, "{},{},{c},{v:.6}", seed.seed, arm.slug());
            }
            let _ = writeln!(s, "{},{},macro,{:.6}", seed.seed, arm.slug(), r.fid.macro_average);
        }
    }
    s
}

const ARM_COLORS: [(Arm, &str); 2] = [(Arm::Cls, "#8c8c8c"), (Arm::Medi, "#d95f02")];

/// Grouped bars of the seed-averaged per-class FID, with a dotted line at
/// each arm's average.
pub fn render_fid_svg(report: &FidStudyReport) -> String {
    let classes: Vec<&String> = report.per_class_mean.values().flat_map(|m| m.keys()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let (w, h, left, bottom, top) = (120.0 + 90.0 * classes.len().max(1) as f64, 320.0, 60.0, 40.0, 30.0);
    let plot_h = h - bottom - top;
    let max = report
        .per_class_mean
        .values()
        .flat_map(|m| m.values())
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let y = |v: f64| top + plot_h * (1.0 - v / max);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="16">Per-class FID ({})</text>"#, report.name);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, h - bottom);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, h - bottom, w - 20.0);
    for k in 0..=4 {
        let v = max * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y(v) + 4.0);
    }
    for (i, c) in classes.iter().enumerate() {
        let x0 = left + 20.0 + 90.0 * i as f64;
        for (j, (arm, color)) in ARM_COLORS.iter().enumerate() {
            if let Some(v) = report.per_class_mean.get(arm).and_then(|m| m.get(*c)) {
                let x = x0 + 30.0 * j as f64;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{:.1}" width="28" height="{:.1}" fill="{color}"/>"#,
                    y(*v),
                    h - bottom - y(*v)
                );
            }
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{c}</text>"#, x0 + 29.0, h - bottom + 16.0);
    }
    for (j, (arm, color)) in ARM_COLORS.iter().enumerate() {
        if let Some(a) = report.macro_fid.get(arm) {
            let _ = writeln!(
                s,
                r#"<line x1="{left}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="{color}" stroke-dasharray="2,3" stroke-width="1.5"/>"#,
                y(a.mean),
                w - 20.0
            );
        }
        let lx = w - 150.0;
        let ly = top + 14.0 * j as f64;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{color}"/>"#, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 14.0, arm.label());
    }
    s.push_str("</svg>\n");
    s
}

/// Accuracy table: one row per arm, Overall and TSS AVG columns per task.
pub fn render_shift_markdown(report: &ShiftStudyReport) -> String {
    let mut s = String::from("|");
    for t in &report.tasks {
        let _ = write!(s, " | {} Overall | {} TSS AVG", t.task, t.task);
    }
    s.push_str(" |\n|---");
    for _ in &report.tasks {
        s.push_str("|---:|---:");
    }
    s.push_str("|\n");
    for label in [NO_SYN_LABEL, CLS_LABEL, MEDI_LABEL] {
        let _ = write!(s, "| {label}");
        for t in &report.tasks {
            match t.row(label) {
                Some(r) => {
                    let _ = write!(s, " | {} | {}", r.overall, r.tss_avg);
                }
                None => s.push_str(" | n/a | n/a"),
            }
        }
        s.push_str(" |\n");
    }
    for t in &report.tasks {
        let _ = write!(s, "\n{}: {} site assignments x {} seeds", t.task, t.runs, report.seeds.len());
        if !t.failed.is_empty() {
            let _ = write!(s, ", {} failed runs excluded", t.failed.len());
        }
        s.push('\n');
        for f in &t.failed {
            let _ = writeln!(s, "- excluded {} (seed {}): {}", f.run_id, f.seed, f.error);
        }
    }
    s
}

pub fn render_shift_csv(report: &ShiftStudyReport) -> String {
    let mut s = String::from("task,seed,run_id,arm,overall,tss_avg\n");
    for t in &report.tasks {
        for r in &t.results {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6}",
                t.task, r.seed, r.result.run_id, r.arm, r.result.overall, r.result.tss_avg
            );
        }
    }
    s
}
