//! Rate-distortion records: strict CSV IO, per-model curves and SVG plots.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RD_HEADER: [&str; 5] = ["model", "lambda", "bpp", "cd_e3", "psnr_db"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRecord {
    pub model: String,
    pub lambda: f64,
    pub bpp: f64,
    /// Chamfer distance × 10³.
    pub cd_e3: f64,
    pub psnr_db: f64,
}

impl RdRecord {
    fn check(&self) -> Result<()> {
        if self.model.is_empty() {
            return Err(Error::InvalidArgument("RD record without a model name".into()));
        }
        if ![self.lambda, self.bpp, self.cd_e3, self.psnr_db].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("RD record for {} at lambda {}", self.model, self.lambda)));
        }
        Ok(())
    }
}

fn check_unique(records: &[RdRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        r.check()?;
        if !seen.insert((r.model.as_str(), r.lambda.to_bits())) {
            return Err(Error::InvalidArgument(format!("duplicate RD point ({}, {})", r.model, r.lambda)));
        }
    }
    Ok(())
}

pub fn write_rd_csv(path: &Path, records: &[RdRecord]) -> Result<()> {
    check_unique(records)?;
    std::fs::write(path, rd_csv_string(records)?).map_err(|e| Error::io(path, e))
}

pub fn rd_csv_string(records: &[RdRecord]) -> Result<String> {
    check_unique(records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    if records.is_empty() {
        w.write_record(RD_HEADER).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_rd_csv(text: &str, location: &str) -> Result<Vec<RdRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::parse(location, e.to_string()))?.clone();
    if header.iter().ne(RD_HEADER) {
        return Err(Error::parse(
            location,
            format!("expected header '{}', found '{}'", RD_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let r: RdRecord = row.map_err(|e| Error::parse(format!("{location}:{}", i + 2), e.to_string()))?;
        out.push(r);
    }
    check_unique(&out)?;
    Ok(out)
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rd_csv(&text, &path.display().to_string())
}

/// Records grouped by model, each group sorted by Bpp (then λ). Every model
/// needs at least two points.
pub fn curves(records: &[RdRecord]) -> Result<BTreeMap<String, Vec<RdRecord>>> {
    check_unique(records)?;
    let mut by: BTreeMap<String, Vec<RdRecord>> = BTreeMap::new();
    for r in records {
        by.entry(r.model.clone()).or_default().push(r.clone());
    }
    if by.is_empty() {
        return Err(Error::InvalidArgument("no RD records".into()));
    }
    for (model, pts) in by.iter_mut() {
        if pts.len() < 2 {
            return Err(Error::InvalidArgument(format!("model '{model}' has {} RD point; a curve needs at least 2", pts.len())));
        }
        pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then(a.lambda.total_cmp(&b.lambda)));
    }
    Ok(by)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 56.0;

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let pad = if hi > lo { (hi - lo) * 0.05 } else { lo.abs().max(1.0) * 0.05 };
    (lo - pad, hi + pad)
}

/// Two panels (CD×10³ vs Bpp, PSNR vs Bpp), one polyline per model.
pub fn plot_svg(records: &[RdRecord]) -> Result<String> {
    let by = curves(records)?;
    let xr = span(records.iter().map(|r| r.bpp));
    let panels: [(&str, fn(&RdRecord) -> f64); 2] = [("CD x 1e3", |r| r.cd_e3), ("PSNR (dB)", |r| r.psnr_db)];
    let width = 2.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 20.0 * by.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    for (pi, (label, get)) in panels.iter().enumerate() {
        let ox = MARGIN + pi as f64 * (PANEL_W + MARGIN);
        let oy = MARGIN;
        let yr = span(records.iter().map(get));
        let px = |x: f64| ox + (x - xr.0) / (xr.1 - xr.0) * PANEL_W;
        let py = |y: f64| oy + PANEL_H - (y - yr.0) / (yr.1 - yr.0) * PANEL_H;
        let _ = writeln!(s, r#"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">Bpp</text>"#, ox + PANEL_W / 2.0, oy + PANEL_H + 36.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{label}</text>"#,
            ox - 40.0,
            oy + PANEL_H / 2.0,
            ox - 40.0,
            oy + PANEL_H / 2.0
        );
        for (t, (x, y)) in [(xr.0, yr.0), (xr.1, yr.1)].into_iter().enumerate() {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x:.3}</text>"#, px(x), oy + PANEL_H + 16.0);
            let anchor = if t == 0 { oy + PANEL_H } else { oy + 10.0 };
            let _ = writeln!(s, r#"<text x="{:.1}" y="{anchor:.1}" text-anchor="end">{y:.3}</text>"#, ox - 4.0);
        }
        for (mi, pts) in by.values().enumerate() {
            let color = PALETTE[mi % PALETTE.len()];
            let coords: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", px(r.bpp), py(get(r)))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, coords.join(" "));
            for r in pts {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(r.bpp), py(get(r)));
            }
        }
    }
    for (mi, model) in by.keys().enumerate() {
        let y = MARGIN + PANEL_H + 56.0 + 20.0 * mi as f64;
        let color = PALETTE[mi % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{MARGIN}" y="{}" width="14" height="4" fill="{color}"/>"#, y - 6.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, MARGIN + 20.0, escape(model));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(model: &str, lambda: f64, bpp: f64) -> RdRecord {
        RdRecord {
            model: model.into(),
            lambda,
            bpp,
            cd_e3: 1.0 / bpp,
            psnr_db: 40.0 + bpp,
        }
    }

    #[test]
    fn csv_round_trip() {
        let rs = vec![rec("a", 0.1, 2.0), rec("a", 1.0, 0.5), rec("b", 0.1, 1.25)];
        let text = rd_csv_string(&rs).unwrap();
        assert!(text.starts_with("model,lambda,bpp,cd_e3,psnr_db\n"));
        assert_eq!(parse_rd_csv(&text, "t").unwrap(), rs);
        assert_eq!(rd_csv_string(&[]).unwrap(), "model,lambda,bpp,cd_e3,psnr_db\n");
    }

    #[test]
    fn rejects_bad_input() {
        let dup = vec![rec("a", 0.1, 2.0), rec("a", 0.1, 1.0)];
        let err = rd_csv_string(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate RD point"), "{err}");
        let text = "model,lambda,bpp,cd_e3,psnr_db\na,0.1,1,1,1\na,0.1,2,2,2\n";
        assert!(parse_rd_csv(text, "t").unwrap_err().to_string().contains("duplicate RD point"));
        assert!(parse_rd_csv("model,lambda,bpp,cd_e3,psnr_db,extra\n", "t").is_err());
        assert!(parse_rd_csv("model,bpp,lambda,cd_e3,psnr_db\n", "t").is_err());
        assert!(parse_rd_csv("model,lambda,bpp,cd_e3,psnr_db\na,x,1,1,1\n", "t").is_err());
        assert!(parse_rd_csv("model,lambda,bpp,cd_e3,psnr_db\na,1,NaN,1,1\n", "t").is_err());
    }

    #[test]
    fn curves_sort_by_rate() {
        let rs = vec![rec("a", 0.01, 3.0), rec("a", 1.0, 0.5), rec("a", 0.1, 1.5)];
        let c = curves(&rs).unwrap();
        let bpps: Vec<f64> = c["a"].iter().map(|r| r.bpp).collect();
        assert_eq!(bpps, vec![0.5, 1.5, 3.0]);
        let svg = plot_svg(&rs).unwrap();
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts = line.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
        let xs: Vec<f64> = pts.split(' ').map(|p| p.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(xs.len(), 3);
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
        let err = curves(&[rec("a", 0.1, 1.0), rec("b", 0.1, 1.0), rec("b", 1.0, 2.0)]).unwrap_err();
        assert!(err.to_string().contains("at least 2"));
    }
}
