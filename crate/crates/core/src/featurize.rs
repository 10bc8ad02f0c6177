//! Builds the fixed 45-column feature table from optical patches, climate
//! series, elevation records and sample metadata.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{ClimateContainer, DemContainer, PatchContainer};
use crate::model::{SampleMeta, SENTINEL};

pub const N_FEATURES: usize = 45;
pub const N_CHANNELS: usize = 7;
pub const RAW_PATCH_SIZE: usize = 64;
pub const PATCH_SIZE: usize = 32;
pub const DEM_SIZE: usize = 32;
pub const CLIMATE_DAYS: usize = 28;
pub const CLIMATE_VARS: usize = 5;
/// Days used for the "fw" (final week) temperature statistics.
pub const FINAL_WEEK: usize = 7;

/// Column names of the feature table, in storage order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "c1_mean",
    "c1_median",
    "c1_std",
    "c2_mean",
    "c2_median",
    "c2_std",
    "c3_mean",
    "c3_median",
    "c3_std",
    "c4_mean",
    "c4_median",
    "c4_std",
    "c5_mean",
    "c5_median",
    "c5_std",
    "c6_mean",
    "c6_median",
    "c6_std",
    "c7_mean",
    "c7_median",
    "c7_std",
    "idx_c3c2",
    "idx_c3c4",
    "idx_c5c4",
    "month",
    "year",
    "dayofweek",
    "latitude",
    "longitude",
    "temp_mean",
    "temp_std",
    "temp_mean_fw",
    "temp_std_fw",
    "rain_mean",
    "rain_std",
    "gust_mean",
    "gust_std",
    "snowc_mean",
    "snowc_std",
    "hgt_mean",
    "hgt_std",
    "altitude",
    "dem_mean",
    "dem_median",
    "dem_std",
];

pub const IDX_BAND_INDICES: usize = 21;
pub const IDX_DATE: usize = 24;
pub const IDX_LOCATION: usize = 27;
pub const IDX_CLIMATE: usize = 29;
pub const IDX_DEM: usize = 41;

/// `H×W×C` unsigned 8-bit raster, row-major and channel-last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl PatchImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{} pixels do not fill a {height}x{width}x{channels} patch",
                pixels.len()
            )));
        }
        Ok(PatchImage {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    pub fn channel(&self, ch: usize) -> impl Iterator<Item = u8> + '_ {
        self.pixels.iter().skip(ch).step_by(self.channels).copied()
    }
}

/// 28 daily values of temperature, rain, gust, snow cover and geopotential
/// height, oldest day first. Missing cells are NaN.
#[derive(Debug, Clone)]
pub struct ClimateSeries {
    values: Vec<f32>,
}

impl PartialEq for ClimateSeries {
    fn eq(&self, other: &Self) -> bool {
        self.values
            .iter()
            .zip(&other.values)
            .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ClimateSeries {
    pub fn from_values(values: Vec<f32>) -> Result<Self> {
        if values.len() != CLIMATE_DAYS * CLIMATE_VARS {
            return Err(Error::invalid(format!(
                "climate series needs {} values, got {}",
                CLIMATE_DAYS * CLIMATE_VARS,
                values.len()
            )));
        }
        Ok(ClimateSeries { values })
    }

    /// Day-major, variable-minor.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, day: usize, var: usize) -> f32 {
        self.values[day * CLIMATE_VARS + var]
    }

    fn column(&self, var: usize, days: std::ops::Range<usize>) -> impl Iterator<Item = f64> + '_ {
        days.map(move |d| self.get(d, var) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElevationRecord {
    /// 32×32 scaled elevation patch.
    pub dem: Vec<u8>,
    /// Absolute altitude at the sample point, metres.
    pub altitude: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// One min/max over every pixel and channel of the image.
    #[default]
    Joint,
    PerChannel,
}

/// Min-max scales a channel-last patch to `0..=255`. Non-finite inputs are
/// ignored for the range and map to 0; a flat range maps everything to 0.
pub fn scale_to_u8(values: &[f64], channels: usize, mode: ScaleMode) -> Vec<u8> {
    let channels = channels.max(1);
    let range = |ch: Option<usize>| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, &v) in values.iter().enumerate() {
            if v.is_finite() && ch.is_none_or(|c| i % channels == c) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    };
    let ranges: Vec<(f64, f64)> = match mode {
        ScaleMode::Joint => vec![range(None); channels],
        ScaleMode::PerChannel => (0..channels).map(|c| range(Some(c))).collect(),
    };
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (lo, hi) = ranges[i % channels];
            if !v.is_finite() || hi <= lo {
                0
            } else {
                // f64::round is half-away-from-zero
                ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

pub fn center_crop(patch: &PatchImage) -> Result<PatchImage> {
    if patch.height != RAW_PATCH_SIZE || patch.width != RAW_PATCH_SIZE {
        return Err(Error::invalid(format!(
            "center crop expects a 64x64 patch, got {}x{}",
            patch.height, patch.width
        )));
    }
    let off = (RAW_PATCH_SIZE - PATCH_SIZE) / 2;
    let c = patch.channels;
    let mut pixels = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE * c);
    for row in off..off + PATCH_SIZE {
        let start = (row * RAW_PATCH_SIZE + off) * c;
        pixels.extend_from_slice(&patch.pixels[start..start + PATCH_SIZE * c]);
    }
    Ok(PatchImage {
        height: PATCH_SIZE,
        width: PATCH_SIZE,
        channels: c,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl Summary {
    pub const MISSING: Summary = Summary {
        mean: SENTINEL,
        median: SENTINEL,
        std: SENTINEL,
    };
}

/// Mean, median (midpoint of the central pair for even counts) and
/// population standard deviation of a u8 multiset.
fn summarize_u8(values: impl Iterator<Item = u8>) -> Option<Summary> {
    let mut hist = [0u64; 256];
    let mut n = 0u64;
    let mut sum = 0u64;
    for v in values {
        hist[v as usize] += 1;
        n += 1;
        sum += v as u64;
    }
    if n == 0 {
        return None;
    }
    let mean = sum as f64 / n as f64;
    let var = hist
        .iter()
        .enumerate()
        .map(|(v, &k)| k as f64 * (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let order_stat = |rank: u64| {
        let mut seen = 0;
        for (v, &k) in hist.iter().enumerate() {
            seen += k;
            if seen > rank {
                return v as f64;
            }
        }
        unreachable!()
    };
    let median = if n % 2 == 1 {
        order_stat(n / 2)
    } else {
        0.5 * (order_stat(n / 2 - 1) + order_stat(n / 2))
    };
    Some(Summary {
        mean,
        median,
        std: var.sqrt(),
    })
}

/// Mean and population std over the finite values.
fn mean_std(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Per-channel statistics. An absent patch yields seven missing summaries.
pub fn channel_stats(patch: Option<&PatchImage>) -> Vec<Summary> {
    match patch {
        None => vec![Summary::MISSING; N_CHANNELS],
        Some(p) => (0..p.channels)
            .map(|c| summarize_u8(p.channel(c)).unwrap_or(Summary::MISSING))
            .collect(),
    }
}

/// Normalized difference `(a - b) / (a + b)`; sentinel when either input is
/// the sentinel or the denominator is zero.
pub fn band_index(a: f64, b: f64) -> f64 {
    if a == SENTINEL || b == SENTINEL || a + b == 0.0 {
        return SENTINEL;
    }
    let v = (a - b) / (a + b);
    if v.is_finite() {
        v
    } else {
        SENTINEL
    }
}

/// Patch whose every pixel in channel `c` is the rounded mean of channel `c`
/// over all given patches.
pub fn synth_mean_image<'a>(
    patches: impl IntoIterator<Item = &'a PatchImage>,
) -> Result<PatchImage> {
    let mut iter = patches.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::invalid("mean image needs at least one present patch"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut sums = vec![0u64; c];
    let mut count = 0u64;
    for p in std::iter::once(first).chain(iter) {
        if (p.height, p.width, p.channels) != (h, w, c) {
            return Err(Error::invalid("patches of differing shape in mean image"));
        }
        for px in p.pixels.chunks_exact(c) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as u64;
            }
        }
        count += (h * w) as u64;
    }
    let means: Vec<u8> = sums
        .iter()
        .map(|&s| {
            if count == 0 {
                0
            } else {
                (s as f64 / count as f64).round() as u8
            }
        })
        .collect();
    let pixels = means.iter().copied().cycle().take(h * w * c).collect();
    Ok(PatchImage {
        height: h,
        width: w,
        channels: c,
        pixels,
    })
}

/// The twelve climate statistics, in feature-table order.
pub fn climate_stats(series: Option<&ClimateSeries>) -> [f64; 12] {
    let mut out = [SENTINEL; 12];
    let Some(s) = series else { return out };
    let put = |out: &mut [f64; 12], at: usize, ms: Option<(f64, f64)>| {
        if let Some((m, sd)) = ms {
            out[at] = m;
            out[at + 1] = sd;
        }
    };
    put(&mut out, 0, mean_std(s.column(0, 0..CLIMATE_DAYS)));
    put(
        &mut out,
        2,
        mean_std(s.column(0, CLIMATE_DAYS - FINAL_WEEK..CLIMATE_DAYS)),
    );
    for var in 1..CLIMATE_VARS {
        put(
            &mut out,
            2 + 2 * var,
            mean_std(s.column(var, 0..CLIMATE_DAYS)),
        );
    }
    out
}

/// `(altitude, mean, median, std)` of an elevation record.
pub fn dem_stats(record: Option<&ElevationRecord>) -> [f64; 4] {
    match record {
        None => [SENTINEL; 4],
        Some(r) => {
            let s = summarize_u8(r.dem.iter().copied()).unwrap_or(Summary::MISSING);
            [r.altitude as f64, s.mean, s.median, s.std]
        }
    }
}

/// `(month, year, dayofweek)` with Monday = 0.
pub fn date_features(date: NaiveDate) -> (u32, i32, u32) {
    (
        date.month(),
        date.year(),
        date.weekday().num_days_from_monday(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRow(pub [f64; N_FEATURES]);

impl FeatureRow {
    pub fn values(&self) -> &[f64; N_FEATURES] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub enum Imputation<'a> {
    #[default]
    Off,
    /// Absent patches are replaced by this image before statistics.
    MeanImage(&'a PatchImage),
}

/// Assembles one feature row. `patch` is expected to be the cropped
/// 32×32×7 image; non-finite results are replaced by the sentinel.
pub fn assemble_row(
    meta: &SampleMeta,
    patch: Option<&PatchImage>,
    climate: Option<&ClimateSeries>,
    elevation: Option<&ElevationRecord>,
    imputation: Imputation<'_>,
) -> FeatureRow {
    let mut row = [SENTINEL; N_FEATURES];
    let patch = match (patch, imputation) {
        (Some(p), _) => Some(p),
        (None, Imputation::MeanImage(m)) => Some(m),
        (None, Imputation::Off) => None,
    };
    let stats = channel_stats(patch);
    for (c, s) in stats.iter().take(N_CHANNELS).enumerate() {
        row[3 * c] = s.mean;
        row[3 * c + 1] = s.median;
        row[3 * c + 2] = s.std;
    }
    let median = |c: usize| stats.get(c).map_or(SENTINEL, |s| s.median);
    row[IDX_BAND_INDICES] = band_index(median(2), median(1));
    row[IDX_BAND_INDICES + 1] = band_index(median(2), median(3));
    row[IDX_BAND_INDICES + 2] = band_index(median(4), median(3));

    let (month, year, dow) = date_features(meta.date);
    row[IDX_DATE] = month as f64;
    row[IDX_DATE + 1] = year as f64;
    row[IDX_DATE + 2] = dow as f64;
    row[IDX_LOCATION] = meta.latitude;
    row[IDX_LOCATION + 1] = meta.longitude;

    row[IDX_CLIMATE..IDX_CLIMATE + 12].copy_from_slice(&climate_stats(climate));
    row[IDX_DEM..IDX_DEM + 4].copy_from_slice(&dem_stats(elevation));

    for v in row.iter_mut() {
        if !v.is_finite() {
            *v = SENTINEL;
        }
    }
    FeatureRow(row)
}

/// Feature rows keyed by uid, in metadata order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub uids: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn sentinel_count(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| r.0.iter())
            .filter(|&&v| v == SENTINEL)
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("uid");
        for name in FEATURE_NAMES {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for (uid, row) in self.uids.iter().zip(&self.rows) {
            s.push_str(uid);
            for v in row.0 {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv<R: std::io::Read>(reader: R, file: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected: Vec<&str> = std::iter::once("uid").chain(FEATURE_NAMES).collect();
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != expected {
            let col = got
                .iter()
                .zip(&expected)
                .position(|(a, b)| a != b)
                .unwrap_or(got.len().min(expected.len()));
            return Err(Error::Row {
                file: file.to_string(),
                row: 0,
                field: expected.get(col).unwrap_or(&"<extra>").to_string(),
                message: "feature header does not match the fixed 46-column layout".into(),
            });
        }
        let mut uids = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut row = [0.0; N_FEATURES];
            for (j, v) in row.iter_mut().enumerate() {
                let raw = rec[j + 1].trim();
                *v = raw.parse().map_err(|_| Error::Row {
                    file: file.to_string(),
                    row: i + 1,
                    field: FEATURE_NAMES[j].to_string(),
                    message: format!("not a number: `{raw}`"),
                })?;
            }
            uids.push(rec[0].trim().to_string());
            rows.push(FeatureRow(row));
        }
        Ok(FeatureTable { uids, rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(f, &path.display().to_string())
    }

    /// Row-major little-endian binary64 matrix, no header.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rows.len() * N_FEATURES * 8);
        for row in &self.rows {
            for v in row.0 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn rows_from_binary(bytes: &[u8]) -> Result<Vec<FeatureRow>> {
        if !bytes.len().is_multiple_of(N_FEATURES * 8) {
            return Err(Error::Container {
                file: "<feature matrix>".into(),
                offset: bytes.len() - bytes.len() % (N_FEATURES * 8),
                message: "length is not a whole number of 45-column rows".into(),
            });
        }
        Ok(bytes
            .chunks_exact(N_FEATURES * 8)
            .map(|chunk| {
                let mut row = [0.0; N_FEATURES];
                for (v, b) in row.iter_mut().zip(chunk.chunks_exact(8)) {
                    *v = f64::from_le_bytes(b.try_into().unwrap());
                }
                FeatureRow(row)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImputationMode {
    #[default]
    Off,
    On,
}

/// Crops 64×64 patches to 32×32; already-cropped patches pass through.
fn prepare_patch(uid: &str, p: &PatchImage) -> Result<PatchImage> {
    if p.channels != N_CHANNELS {
        return Err(Error::invalid(format!(
            "patch `{uid}` has {} channels, expected {N_CHANNELS}",
            p.channels
        )));
    }
    match (p.height, p.width) {
        (RAW_PATCH_SIZE, RAW_PATCH_SIZE) => center_crop(p),
        (PATCH_SIZE, PATCH_SIZE) => Ok(p.clone()),
        (h, w) => Err(Error::invalid(format!(
            "patch `{uid}` is {h}x{w}, expected 64x64 or 32x32"
        ))),
    }
}

/// Builds the feature table for every metadata row. Sources that are `None`
/// contribute sentinel columns. Rows are assembled in parallel; output is
/// independent of the worker count.
pub fn build_feature_table(
    metas: &[SampleMeta],
    patches: Option<&PatchContainer>,
    climate: Option<&ClimateContainer>,
    dem: Option<&DemContainer>,
    mode: ImputationMode,
) -> Result<FeatureTable> {
    let mut cropped: HashMap<&str, PatchImage> = HashMap::new();
    if let Some(pc) = patches {
        for (uid, p) in pc.uids.iter().zip(&pc.patches) {
            if let Some(p) = p {
                cropped.insert(uid, prepare_patch(uid, p)?);
            }
        }
    }
    let mean_image = match mode {
        ImputationMode::Off => None,
        ImputationMode::On => {
            // deterministic order: container order
            let ordered = patches
                .into_iter()
                .flat_map(|pc| pc.uids.iter())
                .filter_map(|u| cropped.get(u.as_str()));
            Some(synth_mean_image(ordered)?)
        }
    };
    let climate_map: HashMap<&str, &ClimateSeries> = climate
        .map(|c| {
            c.uids
                .iter()
                .zip(&c.series)
                .filter_map(|(u, s)| s.as_ref().map(|s| (u.as_str(), s)))
                .collect()
        })
        .unwrap_or_default();
    let dem_map: HashMap<&str, &ElevationRecord> = dem
        .map(|d| {
            d.uids
                .iter()
                .zip(&d.records)
                .filter_map(|(u, r)| r.as_ref().map(|r| (u.as_str(), r)))
                .collect()
        })
        .unwrap_or_default();

    let imputation = match &mean_image {
        Some(m) => Imputation::MeanImage(m),
        None => Imputation::Off,
    };
    let rows = metas
        .par_iter()
        .map(|m| {
            let uid = m.uid.as_str();
            assemble_row(
                m,
                cropped.get(uid),
                climate_map.get(uid).copied(),
                dem_map.get(uid).copied(),
                imputation,
            )
        })
        .collect();
    Ok(FeatureTable {
        uids: metas.iter().map(|m| m.uid.clone()).collect(),
        rows,
    })
}
