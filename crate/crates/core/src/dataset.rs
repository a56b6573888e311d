//! Pageview records, datasets and their wide CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::AllocationRule;
use crate::error::{invalid, Error, Result};

/// Dense row-major matrix of ad features, one row per ad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "feature matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged feature rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.cols..(j + 1) * self.cols]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.cols..(j + 1) * self.cols]
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.data[j * self.cols + k]
    }

    /// Row-major flattening, `x1_1, x1_2, ..., xm_p`.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// One auction result: features, observed allocation and clicks of `m` ads.
#[derive(Debug, Clone, PartialEq)]
pub struct Pageview {
    pub id: u64,
    pub x: FeatureMatrix,
    pub a: AllocationRule,
    pub y: Vec<u8>,
}

/// A collection of pageviews sharing `m` and `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    m: usize,
    p: usize,
    pageviews: Vec<Pageview>,
    provenance: String,
}

impl Dataset {
    pub fn new(m: usize, p: usize, pageviews: Vec<Pageview>, provenance: String) -> Result<Self> {
        if m == 0 || p == 0 {
            return Err(invalid("m and p must be at least 1"));
        }
        for pv in &pageviews {
            if pv.x.rows() != m || pv.x.cols() != p || pv.a.len() != m || pv.y.len() != m {
                return Err(invalid(format!("pageview {} does not match m={m}, p={p}", pv.id)));
            }
            if pv.y.iter().any(|&v| v > 1) {
                return Err(invalid(format!("pageview {} has a non-binary click", pv.id)));
            }
        }
        Ok(Self { m, p, pageviews, provenance })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.pageviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pageviews.is_empty()
    }

    pub fn pageviews(&self) -> &[Pageview] {
        &self.pageviews
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Feature column names `x{i}_{k}` (one-based).
    pub fn schema(&self) -> Vec<String> {
        feature_columns(self.m, self.p)
    }

    /// A dataset over the given pageview indices (duplicates allowed).
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            m: self.m,
            p: self.p,
            pageviews: idx.iter().map(|&k| self.pageviews[k].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Keep pageviews for which `keep` holds.
    pub fn filter(&self, keep: impl Fn(&Pageview) -> bool) -> Dataset {
        Dataset {
            m: self.m,
            p: self.p,
            pageviews: self.pageviews.iter().filter(|pv| keep(pv)).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Pageviews with at least one click.
    pub fn positive_pageviews(&self) -> Dataset {
        self.filter(|pv| pv.y.contains(&1))
    }

    /// Observed click rate of each position.
    pub fn observed_means(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.m).map(|i| self.pageviews.iter().map(|pv| f64::from(pv.y[i])).sum::<f64>() / n).collect()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["pv_id".to_string()];
        h.extend(feature_columns(self.m, self.p));
        h.extend((1..=self.m).map(|i| format!("a{i}")));
        h.extend((1..=self.m).map(|i| format!("y{i}")));
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header())?;
        let mut rec: Vec<String> = Vec::with_capacity(1 + self.m * (self.p + 2));
        for pv in &self.pageviews {
            rec.clear();
            rec.push(pv.id.to_string());
            rec.extend(pv.x.as_slice().iter().map(|v| fmt_f64(*v)));
            rec.extend(pv.a.bits().iter().map(|b| b.to_string()));
            rec.extend(pv.y.iter().map(|b| b.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parse the wide CSV form, rejecting malformed headers, non-binary
    /// values and allocation rules outside the valid space.
    pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let (m, p) = infer_shape(&header)?;
        let expected = {
            let mut h = vec!["pv_id".to_string()];
            h.extend(feature_columns(m, p));
            h.extend((1..=m).map(|i| format!("a{i}")));
            h.extend((1..=m).map(|i| format!("y{i}")));
            h
        };
        if header != expected {
            return Err(Error::Parse {
                location: "line 1".into(),
                message: format!("unexpected header; expected {}", expected.join(",")),
            });
        }
        let mut pageviews = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = rec?;
            let perr = |msg: String| Error::Parse { location: format!("line {line}"), message: msg };
            let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
            let id: u64 = field(0).parse().map_err(|_| perr(format!("bad pv_id {:?}", field(0))))?;
            let mut x = Vec::with_capacity(m * p);
            for c in 1..=m * p {
                let v: f64 =
                    field(c).parse().map_err(|_| perr(format!("bad value {:?} in {}", field(c), expected[c])))?;
                x.push(v);
            }
            let mut bits = Vec::with_capacity(m);
            let mut y = Vec::with_capacity(m);
            for j in 0..m {
                let c = 1 + m * p + j;
                bits.push(parse_bit(field(c)).ok_or_else(|| perr(format!("{} must be 0 or 1", expected[c])))?);
                let c = 1 + m * p + m + j;
                y.push(parse_bit(field(c)).ok_or_else(|| perr(format!("{} must be 0 or 1", expected[c])))?);
            }
            let a = AllocationRule::new(bits).map_err(|e| perr(e.to_string()))?;
            pageviews.push(Pageview { id, x: FeatureMatrix::new(m, p, x)?, a, y });
        }
        Dataset::new(m, p, pageviews, "external".into())
    }

    /// SHA-256 of the CSV serialization.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        sha256_hex(&buf)
    }
}

fn parse_bit(s: &str) -> Option<u8> {
    match s {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    }
}

fn infer_shape(header: &[String]) -> Result<(usize, usize)> {
    let m = header.iter().filter(|h| h.starts_with('a')).count();
    let nx = header.iter().filter(|h| h.starts_with('x')).count();
    if m == 0 || nx == 0 || nx % m != 0 {
        return Err(Error::Parse {
            location: "line 1".into(),
            message: "header must contain pv_id, x{i}_{k}, a{i} and y{i} columns".into(),
        });
    }
    Ok((m, nx / m))
}

pub fn feature_columns(m: usize, p: usize) -> Vec<String> {
    (1..=m).flat_map(|i| (1..=p).map(move |k| format!("x{i}_{k}"))).collect()
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
