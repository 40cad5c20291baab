//! Rate-distortion log rows and their CSV form. One row per coded cloud:
//! which codec configuration, which cloud, and the measured rate/quality.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RdRow {
    pub codec_id: String,
    pub pc_id: String,
    pub bpp: f64,
    pub d1: f64,
    pub d2: f64,
}

pub const RD_CSV_HEADER: &str = "codec_id,pc_id,bpp,d1,d2";

pub fn to_csv(rows: &[RdRow]) -> String {
    let mut out = String::from(RD_CSV_HEADER);
    out.push('\n');
    for r in rows {
        assert!(
            !r.codec_id.contains(',') && !r.pc_id.contains(','),
            "ids must not contain commas"
        );
        out.push_str(&format!("{},{},{},{},{}\n", r.codec_id, r.pc_id, r.bpp, r.d1, r.d2));
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<RdRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == RD_CSV_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "expected RD CSV header '{RD_CSV_HEADER}', got {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!("RD CSV line {} has {} fields, want 5", i + 2, fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("RD CSV line {}: bad {what} '{s}'", i + 2)))
        };
        rows.push(RdRow {
            codec_id: fields[0].trim().to_string(),
            pc_id: fields[1].trim().to_string(),
            bpp: num(fields[2], "bpp")?,
            d1: num(fields[3], "d1")?,
            d2: num(fields[4], "d2")?,
        });
    }
    Ok(rows)
}
