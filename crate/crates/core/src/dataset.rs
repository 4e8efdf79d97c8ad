//! Traffic series ingestion, chronological splits, z-score normalization,
//! sliding windows and day-slot tensors.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::io;

pub type StepRange = Range<usize>;

const MINUTES_PER_DAY: u32 = 1440;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// A time × node grid of non-negative flow readings. Zero marks a missing or
/// noisy reading.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    values: Array2<f64>,
    interval_minutes: u32,
    steps_per_day: usize,
    start: NaiveDateTime,
    start_slot: usize,
    start_dow: usize,
    node_ids: Vec<String>,
    adjacency: Option<Array2<f64>>,
}

impl TrafficSeries {
    /// `values` is `[total_steps × N]`.
    pub fn new(
        values: Array2<f64>,
        interval_minutes: u32,
        start: NaiveDateTime,
        node_ids: Vec<String>,
    ) -> Result<Self> {
        if interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(interval_minutes) {
            return Err(Error::Invalid(format!(
                "interval of {interval_minutes} minutes does not divide a day"
            )));
        }
        if node_ids.len() != values.ncols() {
            return Err(Error::Shape(format!(
                "{} node ids for {} columns",
                node_ids.len(),
                values.ncols()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::Invalid("series has no nodes".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reading {v}")));
        }
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::Invalid(format!("negative reading {v}")));
        }
        let steps_per_day = (MINUTES_PER_DAY / interval_minutes) as usize;
        if values.nrows() < steps_per_day {
            return Err(Error::LessThanOneDay {
                steps: values.nrows(),
                steps_per_day,
            });
        }
        let minute_of_day = start.hour() * 60 + start.minute();
        if !minute_of_day.is_multiple_of(interval_minutes) || start.second() != 0 {
            return Err(Error::Invalid(format!(
                "start time {start} is not aligned to the {interval_minutes}-minute grid"
            )));
        }
        Ok(TrafficSeries {
            start_slot: (minute_of_day / interval_minutes) as usize,
            start_dow: start.weekday().num_days_from_monday() as usize,
            values,
            interval_minutes,
            steps_per_day,
            start,
            node_ids,
            adjacency: None,
        })
    }

    pub fn with_adjacency(mut self, adjacency: Array2<f64>) -> Result<Self> {
        let n = self.num_nodes();
        if adjacency.dim() != (n, n) {
            return Err(Error::Shape(format!(
                "adjacency is {:?}, expected ({n}, {n})",
                adjacency.dim()
            )));
        }
        if adjacency.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid("adjacency weights must be finite and non-negative".into()));
        }
        self.adjacency = Some(adjacency);
        Ok(self)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn total_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.values.ncols()
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn steps_per_day(&self) -> usize {
        self.steps_per_day
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn start_slot(&self) -> usize {
        self.start_slot
    }

    /// Day of week of the first step, Monday = 0.
    pub fn start_dow(&self) -> usize {
        self.start_dow
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn adjacency(&self) -> Option<&Array2<f64>> {
        self.adjacency.as_ref()
    }

    /// Time-of-day slot of `step`.
    pub fn slot_of(&self, step: usize) -> usize {
        (self.start_slot + step) % self.steps_per_day
    }

    /// Day of week of `step`, Monday = 0.
    pub fn dow_of(&self, step: usize) -> usize {
        (self.start_dow + (self.start_slot + step) / self.steps_per_day) % 7
    }

    /// Restricts the series to a contiguous step range and a node subset.
    pub fn select(&self, range: StepRange, nodes: Option<&[usize]>) -> Result<TrafficSeries> {
        check_range(&range, self.total_steps())?;
        let rows = self.values.slice(s![range.clone(), ..]);
        let (values, ids) = match nodes {
            Some(idx) => {
                if let Some(bad) = idx.iter().find(|i| **i >= self.num_nodes()) {
                    return Err(Error::Invalid(format!("node index {bad} out of range")));
                }
                (
                    rows.select(Axis(1), idx),
                    idx.iter().map(|&i| self.node_ids[i].clone()).collect(),
                )
            }
            None => (rows.to_owned(), self.node_ids.clone()),
        };
        let start = self.start
            + chrono::Duration::minutes(range.start as i64 * self.interval_minutes as i64);
        TrafficSeries::new(values, self.interval_minutes, start, ids)
    }

    /// Serializes to the ingest CSV format.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 8);
        out.push_str("timestamp");
        for id in &self.node_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (t, row) in self.values.rows().into_iter().enumerate() {
            let ts = self.start
                + chrono::Duration::minutes(t as i64 * self.interval_minutes as i64);
            out.push_str(&ts.format(TIMESTAMP_FORMAT).to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_csv_string().as_bytes())
    }
}

fn check_range(range: &StepRange, total: usize) -> Result<()> {
    if range.start > range.end || range.end > total {
        return Err(Error::Invalid(format!(
            "step range [{}, {}) outside [0, {total})",
            range.start, range.end
        )));
    }
    Ok(())
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            chrono::DateTime::parse_from_rfc3339(s)
                .ok()
                .map(|d| d.naive_local())
        })
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(',').map(|f| f.trim().trim_matches('"')).collect()
}

/// Parses the `timestamp,node_0,...` CSV format.
pub fn parse_csv(text: &str) -> Result<TrafficSeries> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let header = split_fields(header);
    if header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "header needs a timestamp column and at least one node".into(),
        });
    }
    let node_ids: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
    let n = node_ids.len();

    let mut data = Vec::new();
    let mut first: Option<NaiveDateTime> = None;
    let mut prev: Option<NaiveDateTime> = None;
    let mut interval: Option<i64> = None;
    let mut rows = 0usize;
    for (line_no, line) in lines {
        let fields = split_fields(line);
        if fields.len() != n + 1 {
            return Err(Error::RaggedRow {
                line: line_no,
                expected: n + 1,
                found: fields.len(),
            });
        }
        let ts = parse_timestamp(fields[0]).ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("bad timestamp {:?}", fields[0]),
        })?;
        if let Some(p) = prev {
            let step = (ts - p).num_minutes();
            if step <= 0 || (ts - p).num_seconds() % 60 != 0 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "timestamps must be strictly increasing whole minutes".into(),
                });
            }
            match interval {
                None => interval = Some(step),
                Some(expected) if expected != step => {
                    return Err(Error::NonUniformInterval {
                        line: line_no,
                        expected,
                        found: step,
                    })
                }
                _ => {}
            }
        } else {
            first = Some(ts);
        }
        prev = Some(ts);
        for (col, field) in fields[1..].iter().enumerate() {
            let v = if field.is_empty() {
                0.0
            } else {
                field.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad number {field:?} in column {}", col + 1),
                })?
            };
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("line {line_no}, column {}", col + 1)));
            }
            if v < 0.0 {
                return Err(Error::NegativeReading {
                    line: line_no,
                    column: col + 1,
                    value: v,
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    let interval = match interval {
        Some(i) => i,
        None => {
            return Err(Error::LessThanOneDay {
                steps: rows,
                steps_per_day: 2,
            })
        }
    };
    if interval > MINUTES_PER_DAY as i64 || MINUTES_PER_DAY as i64 % interval != 0 {
        return Err(Error::Invalid(format!(
            "interval of {interval} minutes does not divide a day"
        )));
    }
    let values = Array2::from_shape_vec((rows, n), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    TrafficSeries::new(values, interval as u32, first.unwrap(), node_ids)
}

/// Reads a traffic CSV: header `timestamp,node_0,...`, one row per step.
/// Empty cells are read as 0 (masked downstream).
pub fn ingest_csv(path: &Path) -> Result<TrafficSeries> {
    parse_csv(&io::read_to_string(path)?)
}

/// Reads an edge list `src,dst,weight` into a dense `[N × N]` matrix ordered
/// like `node_ids`.
pub fn parse_adjacency(text: &str, node_ids: &[String]) -> Result<Array2<f64>> {
    let index: HashMap<&str, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let n = node_ids.len();
    let mut adj = Array2::zeros((n, n));
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields = split_fields(line);
        if line.trim().is_empty() || (line_no == 1 && fields.first() == Some(&"src")) {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::RaggedRow {
                line: line_no,
                expected: 3,
                found: fields.len(),
            });
        }
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("unknown node id {id:?}"),
            })
        };
        let (src, dst) = (lookup(fields[0])?, lookup(fields[1])?);
        let w: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad weight {:?}", fields[2]),
        })?;
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("weight {w} must be finite and non-negative"),
            });
        }
        adj[[src, dst]] = w;
    }
    Ok(adj)
}

pub fn load_adjacency(path: &Path, node_ids: &[String]) -> Result<Array2<f64>> {
    parse_adjacency(&io::read_to_string(path)?, node_ids)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: StepRange,
    pub val: StepRange,
    pub test: StepRange,
}

/// Chronological split of `total_steps` by cumulative fractions. Boundaries
/// are floored; the remainder goes to the test split.
pub fn split_chronological(total_steps: usize, ratios: [f64; 3]) -> Result<Splits> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Invalid(format!("split ratios must be positive: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split ratios sum to {sum}, expected 1")));
    }
    let n = total_steps as f64;
    // The small nudge keeps exact products like 0.7 * 10 from flooring to 6.
    let b1 = ((ratios[0] * n) + 1e-9).floor() as usize;
    let b2 = (((ratios[0] + ratios[1]) * n) + 1e-9).floor() as usize;
    let b1 = b1.min(total_steps);
    let b2 = b2.clamp(b1, total_steps);
    let splits = Splits {
        train: 0..b1,
        val: b1..b2,
        test: b2..total_steps,
    };
    for (name, r) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        if r.is_empty() {
            return Err(Error::EmptySplit(format!(
                "{name} split is empty for {total_steps} steps"
            )));
        }
    }
    Ok(splits)
}

/// Scalar z-score normalizer.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(mean.is_finite() && std.is_finite()) {
            return Err(Error::NonFinite("normalizer statistics".into()));
        }
        if std <= 0.0 {
            return Err(Error::ZeroVariance);
        }
        Ok(Normalizer { mean, std })
    }

    /// Population mean and standard deviation over `values`.
    pub fn fit_values<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = 0.0;
        let collected: Vec<f64> = values.into_iter().copied().collect();
        for v in &collected {
            sum += v;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Invalid("cannot fit a normalizer on no values".into()));
        }
        let mean = sum / count as f64;
        let var = collected.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        Normalizer::new(mean, var.sqrt())
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Fits the normalizer on every value in `range`. Zeros (missing readings)
/// are part of the statistics unless `include_zeros` is false.
pub fn fit_normalizer(
    series: &TrafficSeries,
    range: StepRange,
    include_zeros: bool,
) -> Result<Normalizer> {
    check_range(&range, series.total_steps())?;
    if range.is_empty() {
        return Err(Error::Invalid("normalizer range is empty".into()));
    }
    let block = series.values.slice(s![range, ..]);
    if include_zeros {
        Normalizer::fit_values(block.iter())
    } else {
        Normalizer::fit_values(block.iter().filter(|v| **v != 0.0))
    }
}

/// One forecasting sample: `history` is `[N × l1]` in model (normalized)
/// units, `target` is `[N × l2]` in original units.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub history: ArrayView2<'a, f64>,
    pub target: ArrayView2<'a, f64>,
    /// Time-of-day slot of the first target step.
    pub tod: usize,
    /// Day of week of the first target step, Monday = 0.
    pub dow: usize,
}

/// All stride-1 windows over a step range. Holds one normalized copy of the
/// range and hands out views.
#[derive(Debug, Clone)]
pub struct WindowSet {
    inputs: Array2<f64>,
    targets: Array2<f64>,
    range: StepRange,
    l1: usize,
    l2: usize,
    tods: Vec<usize>,
    dows: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.tods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tods.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn history_len(&self) -> usize {
        self.l1
    }

    pub fn horizon_len(&self) -> usize {
        self.l2
    }

    pub fn range(&self) -> StepRange {
        self.range.clone()
    }

    /// Absolute series steps covered by the targets of window `i`.
    pub fn target_steps(&self, i: usize) -> StepRange {
        let s = self.range.start + i + self.l1;
        s..s + self.l2
    }

    pub fn get(&self, i: usize) -> Window<'_> {
        Window {
            history: self.inputs.slice(s![i..i + self.l1, ..]).reversed_axes(),
            target: self.targets.slice(s![i + self.l1..i + self.l1 + self.l2, ..]).reversed_axes(),
            tod: self.tods[i],
            dow: self.dows[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Window<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn windows(&self, idx: &[usize]) -> Vec<Window<'_>> {
        idx.iter().map(|&i| self.get(i)).collect()
    }

    pub fn all(&self) -> Vec<Window<'_>> {
        self.iter().collect()
    }
}

/// Builds every stride-1 `(l1, l2)` window in `range`. History is normalized
/// with `normalizer` when given; targets stay in original units.
pub fn make_windows(
    series: &TrafficSeries,
    range: StepRange,
    l1: usize,
    l2: usize,
    normalizer: Option<&Normalizer>,
) -> Result<WindowSet> {
    check_range(&range, series.total_steps())?;
    if l1 == 0 || l2 == 0 {
        return Err(Error::Invalid("window lengths must be positive".into()));
    }
    let len = range.len();
    if len < l1 + l2 {
        return Err(Error::RangeTooShort {
            len,
            needed: l1 + l2,
        });
    }
    let targets = series.values.slice(s![range.clone(), ..]).to_owned();
    let inputs = match normalizer {
        Some(nz) => targets.mapv(|v| nz.apply(v)),
        None => targets.clone(),
    };
    let count = len - l1 - l2 + 1;
    let first_target = |i: usize| range.start + i + l1;
    Ok(WindowSet {
        tods: (0..count).map(|i| series.slot_of(first_target(i))).collect(),
        dows: (0..count).map(|i| series.dow_of(first_target(i))).collect(),
        inputs,
        targets,
        range,
        l1,
        l2,
    })
}

/// Day-slot tensor `[D × N × T]` of complete, slot-0-aligned days.
#[derive(Debug, Clone, PartialEq)]
pub struct DayTensor {
    data: Array3<f64>,
    first_step: usize,
}

impl DayTensor {
    pub fn from_array(data: Array3<f64>, first_step: usize) -> Result<Self> {
        let (d, n, t) = data.dim();
        if d == 0 || n == 0 || t == 0 {
            return Err(Error::Shape(format!("empty day tensor {:?}", data.dim())));
        }
        Ok(DayTensor { data, first_step })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn num_days(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_nodes(&self) -> usize {
        self.data.dim().1
    }

    pub fn slots(&self) -> usize {
        self.data.dim().2
    }

    /// Source steps covered, `[first_step, first_step + D·T)`.
    pub fn step_range(&self) -> StepRange {
        self.first_step..self.first_step + self.num_days() * self.slots()
    }

    pub fn normalized(&self, normalizer: &Normalizer) -> DayTensor {
        DayTensor {
            data: self.data.mapv(|v| normalizer.apply(v)),
            first_step: self.first_step,
        }
    }

    /// Back to `[D·T × N]`, time-major like the source values.
    pub fn flatten(&self) -> Array2<f64> {
        let (d, n, t) = self.data.dim();
        let mut out = Array2::zeros((d * t, n));
        for day in 0..d {
            for node in 0..n {
                for slot in 0..t {
                    out[[day * t + slot, node]] = self.data[[day, node, slot]];
                }
            }
        }
        out
    }
}

/// First step at or after `from` that falls on slot 0.
pub fn next_day_start(series: &TrafficSeries, from: usize) -> usize {
    let t = series.steps_per_day();
    from + (t - series.slot_of(from)) % t
}

/// Reshapes the complete, slot-0-aligned days inside `range`. Partial
/// leading and trailing days are dropped.
pub fn to_day_tensor(series: &TrafficSeries, range: StepRange) -> Result<DayTensor> {
    check_range(&range, series.total_steps())?;
    let t = series.steps_per_day();
    let first = next_day_start(series, range.start);
    let days = range.end.saturating_sub(first) / t;
    if days == 0 {
        return Err(Error::NoCompleteDay {
            start: range.start,
            end: range.end,
        });
    }
    let n = series.num_nodes();
    let mut data = Array3::zeros((days, n, t));
    for d in 0..days {
        let block = series.values.slice(s![first + d * t..first + (d + 1) * t, ..]);
        data.slice_mut(s![d, .., ..]).assign(&block.t());
    }
    DayTensor::from_array(data, first)
}
