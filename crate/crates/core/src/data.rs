//! Count panels indexed by (population, time, age), CSV ingestion and the
//! `log(1+y)` transform shared by the model and the benchmarks.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

/// Column mapping for long-format CSV input.
///
/// The population key is the concatenation (joined with `/`) of the values in
/// `group_columns`, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSchema {
    pub group_columns: Vec<String>,
    pub year_column: String,
    pub age_column: String,
    pub count_column: String,
    /// `None` means: use a column named `offset` when present, else offsets ≡ 1.
    pub offset_column: Option<String>,
    /// Offset used for every cell when no offset column is read.
    pub default_offset: f64,
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            group_columns: vec!["population".into()],
            year_column: "year".into(),
            age_column: "age".into(),
            count_column: "count".into(),
            offset_column: None,
            default_offset: 1.0,
        }
    }
}

impl PanelSchema {
    /// Default schema that also folds a `sex` column into the population key.
    pub fn with_sex() -> Self {
        Self {
            group_columns: vec!["population".into(), "sex".into()],
            ..Self::default()
        }
    }
}

/// Dense N×T×A count tensor with exposures, labels and an observation mask.
///
/// Storage is row-major over `(i, t, x)`. Cells with `mask == false` are held
/// out or missing; their counts are stored as 0 and never enter a likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct CountPanel {
    n_pop: usize,
    n_time: usize,
    n_age: usize,
    counts: Vec<u64>,
    offsets: Vec<f64>,
    mask: Vec<bool>,
    population_labels: Vec<String>,
    year_labels: Vec<i64>,
    age_labels: Vec<String>,
}

impl CountPanel {
    pub fn new(
        dims: (usize, usize, usize),
        counts: Vec<u64>,
        offsets: Vec<f64>,
        mask: Vec<bool>,
        population_labels: Vec<String>,
        year_labels: Vec<i64>,
        age_labels: Vec<String>,
    ) -> Result<Self> {
        let (n, t, a) = dims;
        let len = n * t * a;
        if counts.len() != len || offsets.len() != len || mask.len() != len {
            return invalid(format!("tensor lengths do not match dims {n}x{t}x{a}"));
        }
        if population_labels.len() != n || year_labels.len() != t || age_labels.len() != a {
            return invalid("label list lengths do not match tensor dims");
        }
        if year_labels.windows(2).any(|w| w[1] != w[0] + 1) {
            return invalid("year labels must be strictly increasing with unit spacing");
        }
        if let Some(o) = offsets.iter().find(|o| !(**o > 0.0) || !o.is_finite()) {
            return invalid(format!("offsets must be positive and finite, found {o}"));
        }
        let mut counts = counts;
        for (c, m) in counts.iter_mut().zip(&mask) {
            if !m {
                *c = 0;
            }
        }
        Ok(Self {
            n_pop: n,
            n_time: t,
            n_age: a,
            counts,
            offsets,
            mask,
            population_labels,
            year_labels,
            age_labels,
        })
    }

    /// Fully observed panel with default labels (`p1..`, years `1..=T`, ages `0..`).
    pub fn from_counts(dims: (usize, usize, usize), counts: Vec<u64>, offsets: Vec<f64>) -> Result<Self> {
        let (n, t, a) = dims;
        Self::new(
            dims,
            counts,
            offsets,
            vec![true; n * t * a],
            (1..=n).map(|i| format!("p{i}")).collect(),
            (1..=t as i64).collect(),
            (0..a).map(|x| x.to_string()).collect(),
        )
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_pop, self.n_time, self.n_age)
    }

    #[inline]
    pub fn index(&self, i: usize, t: usize, x: usize) -> usize {
        (i * self.n_time + t) * self.n_age + x
    }

    #[inline]
    pub fn count(&self, i: usize, t: usize, x: usize) -> u64 {
        self.counts[self.index(i, t, x)]
    }

    #[inline]
    pub fn offset(&self, i: usize, t: usize, x: usize) -> f64 {
        self.offsets[self.index(i, t, x)]
    }

    #[inline]
    pub fn is_observed(&self, i: usize, t: usize, x: usize) -> bool {
        self.mask[self.index(i, t, x)]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn n_observed_in(&self, i: usize) -> usize {
        let block = self.n_time * self.n_age;
        self.mask[i * block..(i + 1) * block].iter().filter(|m| **m).count()
    }

    pub fn population_labels(&self) -> &[String] {
        &self.population_labels
    }

    pub fn year_labels(&self) -> &[i64] {
        &self.year_labels
    }

    pub fn age_labels(&self) -> &[String] {
        &self.age_labels
    }

    /// Same panel with a replacement mask; newly masked counts are zeroed.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        Self::new(
            self.dims(),
            self.counts.clone(),
            self.offsets.clone(),
            mask,
            self.population_labels.clone(),
            self.year_labels.clone(),
            self.age_labels.clone(),
        )
    }

    /// Sub-panel restricted to time indices `start..end`.
    pub fn time_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_time {
            return invalid(format!("time slice {start}..{end} outside 0..{}", self.n_time));
        }
        let t_new = end - start;
        let mut counts = Vec::with_capacity(self.n_pop * t_new * self.n_age);
        let mut offsets = Vec::with_capacity(counts.capacity());
        let mut mask = Vec::with_capacity(counts.capacity());
        for i in 0..self.n_pop {
            for t in start..end {
                let lo = self.index(i, t, 0);
                counts.extend_from_slice(&self.counts[lo..lo + self.n_age]);
                offsets.extend_from_slice(&self.offsets[lo..lo + self.n_age]);
                mask.extend_from_slice(&self.mask[lo..lo + self.n_age]);
            }
        }
        Self::new(
            (self.n_pop, t_new, self.n_age),
            counts,
            offsets,
            mask,
            self.population_labels.clone(),
            self.year_labels[start..end].to_vec(),
            self.age_labels.clone(),
        )
    }

    /// Long-format CSV: `population,year,age,count[,offset]`, observed cells only.
    /// The offset column is written unless every offset equals 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let with_offset = self.offsets.iter().any(|&o| o != 1.0);
        let mut w = csv::Writer::from_writer(out);
        if with_offset {
            w.write_record(["population", "year", "age", "count", "offset"])?;
        } else {
            w.write_record(["population", "year", "age", "count"])?;
        }
        for i in 0..self.n_pop {
            for t in 0..self.n_time {
                for x in 0..self.n_age {
                    let k = self.index(i, t, x);
                    if !self.mask[k] {
                        continue;
                    }
                    let mut rec = vec![
                        self.population_labels[i].clone(),
                        self.year_labels[t].to_string(),
                        self.age_labels[x].clone(),
                        self.counts[k].to_string(),
                    ];
                    if with_offset {
                        rec.push(self.offsets[k].to_string());
                    }
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_count(s: &str, line: u64) -> Result<u64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 => Ok(v as u64),
        _ => Err(Error::InvalidCount {
            line,
            value: s.to_string(),
        }),
    }
}

/// Sort key for age labels: leading integer when present (`"95+"` → 95).
fn age_key(label: &str) -> Option<i64> {
    let digits: String = label.trim().chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// Reads a long-format CSV into a dense panel over the cross product of the
/// observed population, year and age labels.
///
/// Population order follows first appearance; ages are sorted by their leading
/// integer when every label has one, else kept in first-appearance order. Years
/// span `min..=max`; absent cells are masked with count 0.
pub fn load_panel<R: Read>(source: R, schema: &PanelSchema) -> Result<CountPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    if !(schema.default_offset > 0.0 && schema.default_offset.is_finite()) {
        return invalid(format!("default offset must be positive and finite, got {}", schema.default_offset));
    }
    let group_idx: Vec<usize> = schema.group_columns.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let year_idx = col(&schema.year_column)?;
    let age_idx = col(&schema.age_column)?;
    let count_idx = col(&schema.count_column)?;
    let offset_idx = match &schema.offset_column {
        Some(c) => Some(col(c)?),
        None => headers.iter().position(|h| h == "offset"),
    };

    struct Row {
        pop: usize,
        year: i64,
        age: usize,
        count: u64,
        offset: f64,
    }
    let mut pops: Vec<String> = Vec::new();
    let mut pop_ix: HashMap<String, usize> = HashMap::new();
    let mut ages: Vec<String> = Vec::new();
    let mut age_ix: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n as u64 + 2;
        let pop = group_idx.iter().map(|&k| rec.get(k).unwrap_or("")).collect::<Vec<_>>().join("/");
        let year_s = rec.get(year_idx).unwrap_or("");
        let year: i64 = year_s.parse().map_err(|_| Error::InvalidYear {
            line,
            value: year_s.to_string(),
        })?;
        let age = rec.get(age_idx).unwrap_or("").to_string();
        let count = parse_count(rec.get(count_idx).unwrap_or(""), line)?;
        let offset = match offset_idx {
            None => schema.default_offset,
            Some(k) => {
                let s = rec.get(k).unwrap_or("");
                match s.parse::<f64>() {
                    Ok(v) if v > 0.0 && v.is_finite() => v,
                    _ => {
                        return Err(Error::InvalidOffset {
                            line,
                            value: s.to_string(),
                        })
                    }
                }
            }
        };
        let p = *pop_ix.entry(pop.clone()).or_insert_with(|| {
            pops.push(pop);
            pops.len() - 1
        });
        let a = *age_ix.entry(age.clone()).or_insert_with(|| {
            ages.push(age);
            ages.len() - 1
        });
        rows.push(Row {
            pop: p,
            year,
            age: a,
            count,
            offset,
        });
    }
    if rows.is_empty() {
        return invalid("no data rows");
    }

    // final age order
    let mut age_order: Vec<usize> = (0..ages.len()).collect();
    if ages.iter().all(|a| age_key(a).is_some()) {
        age_order.sort_by_key(|&k| age_key(&ages[k]));
    }
    let mut age_pos = vec![0; ages.len()];
    for (pos, &k) in age_order.iter().enumerate() {
        age_pos[k] = pos;
    }
    let ymin = rows.iter().map(|r| r.year).min().unwrap();
    let ymax = rows.iter().map(|r| r.year).max().unwrap();
    let (n, t, a) = (pops.len(), (ymax - ymin + 1) as usize, ages.len());
    let mut counts = vec![0u64; n * t * a];
    let mut offsets = vec![1.0; n * t * a];
    let mut mask = vec![false; n * t * a];
    for r in &rows {
        let k = (r.pop * t + (r.year - ymin) as usize) * a + age_pos[r.age];
        if mask[k] {
            return Err(Error::DuplicateCell {
                population: pops[r.pop].clone(),
                year: r.year,
                age: ages[r.age].clone(),
            });
        }
        mask[k] = true;
        counts[k] = r.count;
        offsets[k] = r.offset;
    }
    CountPanel::new(
        (n, t, a),
        counts,
        offsets,
        mask,
        pops,
        (ymin..=ymax).collect(),
        age_order.iter().map(|&k| ages[k].clone()).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogTransform {
    /// `ỹ = log(1 + y)`
    Log1p,
}

/// Log-transformed panel, same layout and mask as its source.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPanel {
    n_pop: usize,
    n_time: usize,
    n_age: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    pub transform: LogTransform,
}

impl LogPanel {
    /// Builds a panel from raw log-scale values (row-major over `(i, t, x)`).
    pub fn from_values(dims: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        let (n, t, a) = dims;
        if values.len() != n * t * a {
            return invalid("value length does not match dims");
        }
        Ok(Self {
            n_pop: n,
            n_time: t,
            n_age: a,
            mask: vec![true; values.len()],
            values,
            transform: LogTransform::Log1p,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_pop, self.n_time, self.n_age)
    }

    #[inline]
    pub fn value(&self, i: usize, t: usize, x: usize) -> f64 {
        self.values[(i * self.n_time + t) * self.n_age + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// `T×A` matrix of population `i`.
    pub fn matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_time, self.n_age, |t, x| self.value(i, t, x))
    }

    pub fn time_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_time {
            return invalid("time slice out of range");
        }
        let t_new = end - start;
        let mut values = Vec::with_capacity(self.n_pop * t_new * self.n_age);
        let mut mask = Vec::with_capacity(values.capacity());
        for i in 0..self.n_pop {
            for t in start..end {
                let lo = (i * self.n_time + t) * self.n_age;
                values.extend_from_slice(&self.values[lo..lo + self.n_age]);
                mask.extend_from_slice(&self.mask[lo..lo + self.n_age]);
            }
        }
        Ok(Self {
            n_pop: self.n_pop,
            n_time: t_new,
            n_age: self.n_age,
            values,
            mask,
            transform: self.transform,
        })
    }
}

pub fn to_log_panel(panel: &CountPanel) -> LogPanel {
    let (n, t, a) = panel.dims();
    LogPanel {
        n_pop: n,
        n_time: t,
        n_age: a,
        values: panel.counts().iter().map(|&y| (y as f64).ln_1p()).collect(),
        mask: panel.mask().to_vec(),
        transform: LogTransform::Log1p,
    }
}
