//! Report artifacts: calibration-report JSON I/O, hand-emitted SVG charts
//! (ECE vs level, reliability diagram, micro-ECE bars), and the merged
//! comparison CSV.
//!
//! All outputs are byte-deterministic functions of their inputs: no
//! timestamps, no absolute paths. Provenance (model tag, seed, config
//! snapshot) is embedded in an SVG `<metadata>` element and as per-row
//! seed/config-checksum columns in the CSV.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{CalibrationReport, REPORT_SCHEMA_VERSION};

pub fn write_report_json(report: &CalibrationReport, path: impl AsRef<Path>) -> Result<()> {
    let mut f = File::create(path)?;
    let text =
        serde_json::to_string_pretty(report).map_err(|e| Error::Schema(e.to_string()))?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_report_json(path: impl AsRef<Path>) -> Result<CalibrationReport> {
    let mut text = String::new();
    File::open(path.as_ref())?.read_to_string(&mut text)?;
    let report: CalibrationReport =
        serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "report schema version {} not supported (expected {})",
            report.schema_version, REPORT_SCHEMA_VERSION
        )));
    }
    Ok(report)
}

const PALETTE: [&str; 8] = [
    "#4878cf", "#d65f5f", "#6acc65", "#b47cc7", "#c4ad66", "#77bedb", "#e08b46", "#8c8c8c",
];

const DASHES: [&str; 4] = ["", "6,3", "2,2", "8,2,2,2"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64, provenance: &str) -> Self {
        let mut body = String::new();
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
             viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        ));
        body.push_str(&format!("<metadata>{}</metadata>\n", xml_escape(provenance)));
        body.push_str(&format!(
            "<rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
        ));
        Self { body, width, height }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dash: &str) {
        let dash_attr = if dash.is_empty() {
            String::new()
        } else {
            format!(" stroke-dasharray=\"{dash}\"")
        };
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"1\"{dash_attr}/>\n",
            fmt2(x1), fmt2(y1), fmt2(x2), fmt2(y2)
        ));
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, dash: &str) {
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{},{}", fmt2(*x), fmt2(*y))).collect();
        let dash_attr = if dash.is_empty() {
            String::new()
        } else {
            format!(" stroke-dasharray=\"{dash}\"")
        };
        self.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"{dash_attr}/>\n",
            coords.join(" ")
        ));
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: &str) {
        self.body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\" stroke=\"{stroke}\"/>\n",
            fmt2(x), fmt2(y), fmt2(w.max(0.0)), fmt2(h.max(0.0))
        ));
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, content: &str) {
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\">{}</text>\n",
            fmt2(x),
            fmt2(y),
            xml_escape(content)
        ));
    }

    fn finish(mut self) -> String {
        let _ = (self.width, self.height);
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn provenance_json(reports: &[(String, CalibrationReport)]) -> String {
    let entries: Vec<serde_json::Value> = reports
        .iter()
        .map(|(name, r)| {
            serde_json::json!({
                "model": name,
                "model_tag": r.model_tag,
                "seed": r.seed,
                "config": r.config,
            })
        })
        .collect();
    serde_json::Value::Array(entries).to_string()
}

/// Plot area helper: margins and data-to-pixel mapping.
struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    x_max: f64,
    y_max: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.x0 + x / self.x_max * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - y / self.y_max * self.h
    }
}

fn draw_axes(svg: &mut Svg, f: &Frame, x_label: &str, y_label: &str, x_ticks: &[f64]) {
    svg.line(f.x0, f.y0, f.x0, f.y0 + f.h, "#333", "");
    svg.line(f.x0, f.y0 + f.h, f.x0 + f.w, f.y0 + f.h, "#333", "");
    for &t in x_ticks {
        let x = f.px(t);
        svg.line(x, f.y0 + f.h, x, f.y0 + f.h + 4.0, "#333", "");
        svg.text(x, f.y0 + f.h + 16.0, "middle", &format!("{t}"));
    }
    let y_step = (f.y_max / 5.0 * 100.0).ceil() / 100.0;
    let mut t = 0.0;
    while t <= f.y_max + 1e-9 {
        let y = f.py(t);
        svg.line(f.x0 - 4.0, y, f.x0, y, "#333", "");
        svg.text(f.x0 - 8.0, y + 4.0, "end", &fmt2(t));
        t += y_step;
    }
    svg.text(f.x0 + f.w / 2.0, f.y0 + f.h + 32.0, "middle", x_label);
    svg.text(f.x0 - 34.0, f.y0 - 8.0, "start", y_label);
}

/// ECE at each perturbation level, one polyline per (model, perturbation).
pub fn ece_vs_level_svg(reports: &[(String, CalibrationReport)]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Contract("no reports to plot".into()));
    }
    let mut svg = Svg::new(720.0, 460.0, &provenance_json(reports));
    let mut y_max = 0.0f64;
    for (_, r) in reports {
        for c in &r.cells {
            y_max = y_max.max(c.ece);
        }
    }
    let frame = Frame {
        x0: 60.0,
        y0: 30.0,
        w: 450.0,
        h: 360.0,
        x_max: 90.0,
        y_max: (y_max * 1.1).max(0.05),
    };
    draw_axes(
        &mut svg,
        &frame,
        "perturbation level",
        "ECE",
        &[0.0, 30.0, 60.0, 90.0],
    );

    let mut legend_y = 40.0;
    for (mi, (name, r)) in reports.iter().enumerate() {
        let dash = DASHES[mi % DASHES.len()];
        let mut kinds: Vec<&str> = r.cells.iter().map(|c| c.perturbation.as_str()).collect();
        kinds.dedup();
        for (ki, kind) in kinds.iter().enumerate() {
            let color = PALETTE[ki % PALETTE.len()];
            let pts: Vec<(f64, f64)> = r
                .cells
                .iter()
                .filter(|c| c.perturbation == *kind)
                .map(|c| (frame.px(c.level as f64), frame.py(c.ece)))
                .collect();
            if pts.len() > 1 {
                svg.polyline(&pts, color, dash);
            }
            svg.line(530.0, legend_y - 4.0, 560.0, legend_y - 4.0, color, dash);
            svg.text(566.0, legend_y, "start", &format!("{name}/{kind}"));
            legend_y += 16.0;
        }
    }
    Ok(svg.finish())
}

/// Reliability diagram of one (perturbation, level) cell: per-bin accuracy
/// bars against per-bin mean confidence, with the identity diagonal.
pub fn reliability_svg(
    name: &str,
    report: &CalibrationReport,
    kind: &str,
    level: u32,
) -> Result<String> {
    let cell = report
        .cells
        .iter()
        .find(|c| c.perturbation == kind && c.level == level)
        .ok_or_else(|| {
            Error::Schema(format!("report has no cell for {kind} level {level}"))
        })?;
    let reports = [(name.to_string(), report.clone())];
    let mut svg = Svg::new(520.0, 460.0, &provenance_json(&reports));
    let frame = Frame {
        x0: 60.0,
        y0: 30.0,
        w: 380.0,
        h: 360.0,
        x_max: 1.0,
        y_max: 1.0,
    };
    draw_axes(
        &mut svg,
        &frame,
        "confidence",
        "accuracy",
        &[0.0, 0.25, 0.5, 0.75, 1.0],
    );
    svg.line(
        frame.px(0.0),
        frame.py(0.0),
        frame.px(1.0),
        frame.py(1.0),
        "#888",
        "4,3",
    );
    for b in &cell.bins {
        if b.count == 0 {
            continue;
        }
        let (lo, hi) = (b.lower, b.upper);
        let acc = b.avg_accuracy.unwrap();
        let conf = b.avg_confidence.unwrap();
        let x = frame.px(lo) + 1.0;
        let w = frame.px(hi) - frame.px(lo) - 2.0;
        svg.rect(x, frame.py(acc), w, frame.py(0.0) - frame.py(acc), PALETTE[0], "none");
        svg.rect(x, frame.py(conf), w, frame.py(0.0) - frame.py(conf), "none", PALETTE[1]);
    }
    svg.text(
        frame.x0 + frame.w / 2.0,
        452.0,
        "middle",
        &format!("{name}: {kind} level {level} (ECE {:.4})", cell.ece),
    );
    Ok(svg.finish())
}

/// Micro-averaged ECE per perturbation, grouped bars per model.
pub fn micro_ece_bar_svg(reports: &[(String, CalibrationReport)]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Contract("no reports to plot".into()));
    }
    let kinds: Vec<String> = reports[0]
        .1
        .micro_ece
        .iter()
        .map(|m| m.perturbation.clone())
        .collect();
    let mut y_max = 0.0f64;
    for (_, r) in reports {
        for m in &r.micro_ece {
            y_max = y_max.max(m.micro_ece);
        }
    }
    let mut svg = Svg::new(720.0, 460.0, &provenance_json(reports));
    let frame = Frame {
        x0: 60.0,
        y0: 30.0,
        w: 450.0,
        h: 360.0,
        x_max: kinds.len() as f64,
        y_max: (y_max * 1.1).max(0.05),
    };
    draw_axes(&mut svg, &frame, "perturbation", "micro-averaged ECE", &[]);
    let group_w = frame.w / kinds.len() as f64;
    let bar_w = group_w * 0.8 / reports.len() as f64;
    for (ki, kind) in kinds.iter().enumerate() {
        let gx = frame.x0 + ki as f64 * group_w;
        svg.text(gx + group_w / 2.0, frame.y0 + frame.h + 16.0, "middle", kind);
        for (mi, (_, r)) in reports.iter().enumerate() {
            if let Some(m) = r.micro_ece.iter().find(|m| &m.perturbation == kind) {
                let x = gx + group_w * 0.1 + mi as f64 * bar_w;
                let y = frame.py(m.micro_ece);
                svg.rect(
                    x,
                    y,
                    bar_w - 1.0,
                    frame.py(0.0) - y,
                    PALETTE[mi % PALETTE.len()],
                    "none",
                );
            }
        }
    }
    let mut legend_y = 40.0;
    for (mi, (name, _)) in reports.iter().enumerate() {
        svg.rect(530.0, legend_y - 9.0, 12.0, 10.0, PALETTE[mi % PALETTE.len()], "none");
        svg.text(548.0, legend_y, "start", name);
        legend_y += 16.0;
    }
    Ok(svg.finish())
}

fn config_sha(r: &CalibrationReport) -> String {
    let mut hasher = Sha256::new();
    hasher.update(r.config.to_string().as_bytes());
    let digest = hasher.finalize();
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// Merged comparison table: one row per (model, perturbation).
pub fn comparison_csv(reports: &[(String, CalibrationReport)]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Contract("no reports to merge".into()));
    }
    let mut out =
        String::from("model,seed,config_sha,perturbation,micro_ece,test_accuracy,in_domain_ece\n");
    for (name, r) in reports {
        let sha = config_sha(r);
        for m in &r.micro_ece {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                name,
                r.seed,
                sha,
                m.perturbation,
                crate::data::fmt_float(m.micro_ece),
                crate::data::fmt_float(r.test_accuracy),
                crate::data::fmt_float(r.in_domain_ece),
            ));
        }
    }
    Ok(out)
}

/// Minimal well-formedness check used by tests and the CLI: tags balance
/// and the document parses as UTF-8 XML-ish structure.
pub fn svg_is_well_formed(svg: &str) -> bool {
    let opens = svg.matches("<svg").count();
    let closes = svg.matches("</svg>").count();
    if opens != 1 || closes != 1 {
        return false;
    }
    // Every '<' begins a tag and every tag closes.
    let mut depth: i64 = 0;
    for tag in svg.split('<').skip(1) {
        let Some(end) = tag.find('>') else { return false };
        let inner = &tag[..end];
        if inner.starts_with('/') {
            depth -= 1;
        } else if !inner.ends_with('/') && !inner.starts_with('?') && !inner.starts_with('!') {
            depth += 1;
        }
        if depth < 0 {
            return false;
        }
    }
    depth == 0
}
