//! Batch cost reports: JSON block specs in, CSV rows out.
//!
//! Each input row is a block spec (tagged by `kind`) plus the input
//! resolution: `{"kind": "std_downsample", "channels": 32, "h": 64, "w": 64}`.

use std::path::Path;

use detlab_core::tensor::{count_cost, BlockSpec, CostReport};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::json;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpecRow {
    #[serde(flatten)]
    pub block: BlockSpec,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub kind: String,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub macs: u64,
    pub params: u64,
    pub formula_macs: Option<u64>,
    pub formula_params: Option<u64>,
}

impl CostRow {
    pub fn new(spec: &CostSpecRow, report: &CostReport) -> Self {
        CostRow {
            kind: spec.block.kind_name().to_string(),
            h: spec.h,
            w: spec.w,
            c: spec.block.in_channels(),
            macs: report.macs,
            params: report.params,
            formula_macs: report.formula_macs,
            formula_params: report.formula_params,
        }
    }
}

/// Parse rows one at a time so that errors name the offending row.
pub fn parse_specs(text: &str, path: &Path) -> Result<Vec<CostSpecRow>> {
    let rows: Vec<Value> = json::parse_str(text, path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value(v).map_err(|e| Error::config(format!("{}: row {i}: {e}", path.display()))))
        .collect()
}

pub fn cost_rows(specs: &[CostSpecRow]) -> Result<Vec<CostRow>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            count_cost(&s.block, s.h, s.w)
                .map(|r| CostRow::new(s, &r))
                .map_err(|e| Error::config(format!("row {i} ({}): {e}", s.block.kind_name())))
        })
        .collect()
}

pub fn write_csv<W: std::io::Write>(rows: &[CostRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::invariant(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_of(text: &str) -> Result<String> {
        let specs = parse_specs(text, Path::new("s.json"))?;
        let mut buf = Vec::new();
        write_csv(&cost_rows(&specs)?, &mut buf)?;
        Ok(String::from_utf8(buf).unwrap())
    }

    #[test]
    fn downsample_rows() {
        let out = csv_of(
            r#"[{"kind":"std_downsample","channels":32,"h":64,"w":64},
                {"kind":"scd_downsample","channels":32,"h":64,"w":64},
                {"kind":"conv","c_in":3,"c_out":5,"kernel":1,"stride":1,"padding":0,"groups":1,"h":1,"w":1},
                {"kind":"cib","channels":8,"h":7,"w":7}]"#,
        )
        .unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "kind,H,W,C,macs,params,formula_macs,formula_params");
        assert_eq!(lines[1], "std_downsample,64,64,32,18874368,18432,18874368,18432");
        assert_eq!(lines[2], "scd_downsample,64,64,32,8978432,2624,8978432,2624");
        assert_eq!(lines[3], "conv,1,1,3,15,15,,");
        assert!(lines[4].starts_with("cib,7,7,8,"));
    }

    #[test]
    fn bad_kind_names_row() {
        let err = csv_of(r#"[{"kind":"cib","channels":8,"h":8,"w":8},{"kind":"bogus","channels":8,"h":8,"w":8}]"#)
            .unwrap_err();
        match err {
            Error::Config(m) => assert!(m.contains("row 1") && m.contains("bogus"), "{m}"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn invalid_spec_names_row() {
        let err = csv_of(r#"[{"kind":"psa","channels":0,"n_psa":1,"h":8,"w":8}]"#).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("row 0")));
    }
}
