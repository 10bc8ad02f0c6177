//! File formats: CSV schemas for metadata, labels and predictions, and the
//! little-endian `HABP` / `HABC` / `HABD` sample containers.
//!
//! Every container shares one layout:
//!
//! ```text
//! offset  size            field
//! 0       4               magic ("HABP" | "HABC" | "HABD")
//! 4       2               version (u16, currently 1)
//! 6       4               n_samples (u32)
//! 10      2               height (u16)
//! 12      2               width (u16)
//! 14      2               channels (u16)
//! 16      ceil(n/8)       presence bitmap, bit i = byte i/8, bit i%8 (LSB first)
//! ..      n × (4 + len)   uid index: u32 byte length + UTF-8 bytes
//! ..      present × H×W×C × elem   payload, row-major, channel-last
//! ..      present × 4     (HABD only) altitude, f32
//! ```
//!
//! `HABP` elements are `u8`; `HABC` elements are `f32` with H = 28 days and
//! W = 5 variables; `HABD` elements are `u8` with H = W = 32, C = 1.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::featurize::{
    ClimateSeries, ElevationRecord, PatchImage, CLIMATE_DAYS, CLIMATE_VARS, DEM_SIZE,
};
use crate::model::{Fold, Label, PredictionSet, Region, SampleMeta, Split};

pub const CONTAINER_VERSION: u16 = 1;
pub const PATCH_MAGIC: [u8; 4] = *b"HABP";
pub const CLIMATE_MAGIC: [u8; 4] = *b"HABC";
pub const DEM_MAGIC: [u8; 4] = *b"HABD";

const HEADER_LEN: usize = 16;

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct Columns {
    file: String,
    idx: Vec<usize>,
    names: &'static [&'static str],
}

impl Columns {
    fn new(
        headers: &csv::StringRecord,
        names: &'static [&'static str],
        file: &str,
    ) -> Result<Self> {
        let mut idx = Vec::with_capacity(names.len());
        for name in names {
            match headers.iter().position(|h| h.trim() == *name) {
                Some(i) => idx.push(i),
                None => {
                    return Err(Error::Row {
                        file: file.to_string(),
                        row: 0,
                        field: name.to_string(),
                        message: "missing column".into(),
                    })
                }
            }
        }
        Ok(Columns {
            file: file.to_string(),
            idx,
            names,
        })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, row: usize, col: usize) -> Result<&'r str> {
        rec.get(self.idx[col])
            .map(str::trim)
            .ok_or_else(|| self.err(row, col, "field absent"))
    }

    fn err(&self, row: usize, col: usize, message: impl Into<String>) -> Error {
        Error::Row {
            file: self.file.clone(),
            row,
            field: self.names[col].to_string(),
            message: message.into(),
        }
    }

    fn parse_f64(&self, rec: &csv::StringRecord, row: usize, col: usize) -> Result<f64> {
        let s = self.get(rec, row, col)?;
        s.parse::<f64>()
            .map_err(|_| self.err(row, col, format!("not a number: `{s}`")))
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader)
}

const METADATA_COLUMNS: &[&str] = &["uid", "latitude", "longitude", "date", "split"];

pub fn parse_metadata<R: Read>(reader: R, file: &str) -> Result<Vec<SampleMeta>> {
    let mut rdr = csv_reader(reader);
    let cols = Columns::new(rdr.headers()?, METADATA_COLUMNS, file)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let uid = cols.get(&rec, row, 0)?.to_string();
        if uid.is_empty() {
            return Err(cols.err(row, 0, "empty uid"));
        }
        if !seen.insert(uid.clone()) {
            return Err(cols.err(row, 0, format!("duplicate uid `{uid}`")));
        }
        let latitude = cols.parse_f64(&rec, row, 1)?;
        if !(-90.0..=90.0).contains(&latitude) {
            return Err(cols.err(row, 1, format!("{latitude} outside [-90, 90]")));
        }
        let longitude = cols.parse_f64(&rec, row, 2)?;
        if !(-180.0..=180.0).contains(&longitude) {
            return Err(cols.err(row, 2, format!("{longitude} outside [-180, 180]")));
        }
        let raw_date = cols.get(&rec, row, 3)?;
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d")
            .map_err(|e| cols.err(row, 3, format!("bad date `{raw_date}`: {e}")))?;
        let split: Split = cols
            .get(&rec, row, 4)?
            .parse()
            .map_err(|e: Error| cols.err(row, 4, e.to_string()))?;
        out.push(SampleMeta {
            uid,
            latitude,
            longitude,
            date,
            split,
        });
    }
    Ok(out)
}

pub fn read_metadata_csv(path: &Path) -> Result<Vec<SampleMeta>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_metadata(f, &file_name(path))
}

const LABEL_COLUMNS: &[&str] = &["uid", "region", "severity", "density"];

/// Parses a label CSV. When `keep` is given, rows whose uid it rejects are
/// skipped without their severity or density being interpreted.
pub fn parse_labels<R: Read>(
    reader: R,
    file: &str,
    keep: Option<&dyn Fn(&str) -> bool>,
) -> Result<Vec<Label>> {
    let mut rdr = csv_reader(reader);
    let cols = Columns::new(rdr.headers()?, LABEL_COLUMNS, file)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let uid = cols.get(&rec, row, 0)?.to_string();
        if let Some(keep) = keep {
            if !keep(&uid) {
                continue;
            }
        }
        if !seen.insert(uid.clone()) {
            return Err(cols.err(row, 0, format!("duplicate uid `{uid}`")));
        }
        let region: Region = cols
            .get(&rec, row, 1)?
            .parse()
            .map_err(|e: Error| cols.err(row, 1, e.to_string()))?;
        let raw_sev = cols.get(&rec, row, 2)?;
        let severity = match raw_sev.parse::<u8>() {
            Ok(s @ 1..=5) => s,
            _ => return Err(cols.err(row, 2, format!("severity must be 1..5, got `{raw_sev}`"))),
        };
        let density = cols.parse_f64(&rec, row, 3)?;
        if !density.is_finite() || density < 0.0 {
            return Err(cols.err(
                row,
                3,
                format!("density must be finite and >= 0, got {density}"),
            ));
        }
        out.push(Label {
            uid,
            region,
            severity,
            density,
        });
    }
    Ok(out)
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<Label>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_labels(f, &file_name(path), None)
}

const PREDICTION_COLUMNS: &[&str] = &["uid", "fold", "prediction"];

pub fn parse_predictions<R: Read>(reader: R, file: &str, model_id: &str) -> Result<PredictionSet> {
    let mut rdr = csv_reader(reader);
    let cols = Columns::new(rdr.headers()?, PREDICTION_COLUMNS, file)?;
    let mut set = PredictionSet::new(model_id);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let uid = cols.get(&rec, row, 0)?;
        let fold: Fold = cols
            .get(&rec, row, 1)?
            .parse()
            .map_err(|e: Error| cols.err(row, 1, e.to_string()))?;
        let value = cols.parse_f64(&rec, row, 2)?;
        set.insert(uid, fold, value)
            .map_err(|e| cols.err(row, 2, e.to_string()))?;
    }
    Ok(set)
}

/// Reads a `uid,fold,prediction` file. The model id is the file stem.
pub fn read_external_predictions(path: &Path) -> Result<PredictionSet> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let model_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "external".into());
    parse_predictions(f, &file_name(path), &model_id)
}

/// Serializes OOF rows (in insertion order) followed by test rows.
pub fn predictions_to_csv(set: &PredictionSet) -> String {
    let mut s = String::from("uid,fold,prediction\n");
    for (uid, (fold, v)) in &set.oof {
        s.push_str(&format!("{uid},{fold},{v}\n"));
    }
    for (uid, v) in &set.test {
        s.push_str(&format!("{uid},test,{v}\n"));
    }
    s
}

pub fn write_predictions_csv(path: &Path, set: &PredictionSet) -> Result<()> {
    write_file(path, predictions_to_csv(set).as_bytes())
}

pub fn severities_to_csv<'a>(rows: impl IntoIterator<Item = (&'a str, u8)>) -> String {
    let mut s = String::from("uid,severity\n");
    for (uid, sev) in rows {
        s.push_str(&format!("{uid},{sev}\n"));
    }
    s
}

const SEVERITY_COLUMNS: &[&str] = &["uid", "severity"];

pub fn parse_severities<R: Read>(reader: R, file: &str) -> Result<Vec<(String, u8)>> {
    let mut rdr = csv_reader(reader);
    let cols = Columns::new(rdr.headers()?, SEVERITY_COLUMNS, file)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let uid = cols.get(&rec, row, 0)?.to_string();
        if !seen.insert(uid.clone()) {
            return Err(cols.err(row, 0, format!("duplicate uid `{uid}`")));
        }
        let raw = cols.get(&rec, row, 1)?;
        match raw.parse::<u8>() {
            Ok(s @ 1..=5) => out.push((uid, s)),
            _ => return Err(cols.err(row, 1, format!("severity must be 1..5, got `{raw}`"))),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Binary containers
// ---------------------------------------------------------------------------

/// Untyped view of a container: header dims, uids, presence and the raw
/// payload bytes of the present samples.
#[derive(Debug, Clone, PartialEq)]
struct RawContainer {
    magic: [u8; 4],
    height: u16,
    width: u16,
    channels: u16,
    uids: Vec<String>,
    presence: Vec<bool>,
    payload: Vec<u8>,
    trailer: Vec<u8>,
}

impl RawContainer {
    fn encode(&self) -> Vec<u8> {
        let n = self.uids.len();
        let uid_bytes: usize = self.uids.iter().map(|u| 4 + u.len()).sum();
        let mut out = Vec::with_capacity(
            HEADER_LEN + n.div_ceil(8) + uid_bytes + self.payload.len() + self.trailer.len(),
        );
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        let mut bitmap = vec![0u8; n.div_ceil(8)];
        for (i, &p) in self.presence.iter().enumerate() {
            if p {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bitmap);
        for uid in &self.uids {
            out.extend_from_slice(&(uid.len() as u32).to_le_bytes());
            out.extend_from_slice(uid.as_bytes());
        }
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.trailer);
        out
    }

    fn decode(
        bytes: &[u8],
        file: &str,
        magic: [u8; 4],
        elem_size: usize,
        trailer_per_sample: usize,
    ) -> Result<Self> {
        let mut r = ByteReader {
            bytes,
            pos: 0,
            file,
        };
        let got = r.take(4, "magic")?;
        if got != magic {
            return Err(r.err_at(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(&magic)
                ),
            ));
        }
        let version = r.u16("version")?;
        if version != CONTAINER_VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let n = r.u32("n_samples")? as usize;
        let height = r.u16("height")?;
        let width = r.u16("width")?;
        let channels = r.u16("channels")?;

        let bitmap = r.take(n.div_ceil(8), "presence bitmap")?;
        let presence: Vec<bool> = (0..n)
            .map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0)
            .collect();
        let tail_bits = n % 8;
        if tail_bits != 0 && bitmap[n / 8] >> tail_bits != 0 {
            return Err(r.err_at(HEADER_LEN + n / 8, "presence bits set past n_samples"));
        }

        // every uid needs at least its 4-byte length prefix
        if n > r.remaining() / 4 {
            return Err(r.err(format!(
                "uid index for {n} samples exceeds remaining {} bytes",
                r.remaining()
            )));
        }
        let mut uids = Vec::with_capacity(n);
        let mut seen = HashSet::with_capacity(n);
        for _ in 0..n {
            let start = r.pos;
            let len = r.u32("uid length")? as usize;
            let raw = r.take(len, "uid")?;
            let uid = std::str::from_utf8(raw)
                .map_err(|_| r.err_at(start, "uid is not valid UTF-8"))?
                .to_string();
            if !seen.insert(uid.clone()) {
                return Err(r.err_at(start, format!("duplicate uid `{uid}`")));
            }
            uids.push(uid);
        }

        let present = presence.iter().filter(|&&p| p).count();
        let per_sample = (height as usize)
            .checked_mul(width as usize)
            .and_then(|v| v.checked_mul(channels as usize))
            .and_then(|v| v.checked_mul(elem_size))
            .ok_or_else(|| r.err("sample size overflows"))?;
        let payload_len = per_sample
            .checked_mul(present)
            .ok_or_else(|| r.err("payload size overflows"))?;
        let trailer_len = trailer_per_sample * present;
        let expected = payload_len
            .checked_add(trailer_len)
            .ok_or_else(|| r.err("payload size overflows"))?;
        if r.remaining() < expected {
            return Err(r.err(format!(
                "truncated payload: header declares {expected} bytes, {} available",
                r.remaining()
            )));
        }
        let payload = r.take(payload_len, "payload")?.to_vec();
        let trailer = r.take(trailer_len, "trailer")?.to_vec();
        if r.remaining() != 0 {
            return Err(r.err(format!("{} trailing bytes after payload", r.remaining())));
        }
        Ok(RawContainer {
            magic,
            height,
            width,
            channels,
            uids,
            presence,
            payload,
            trailer,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> ByteReader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn err(&self, message: impl Into<String>) -> Error {
        self.err_at(self.pos, message)
    }

    fn err_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Container {
            file: self.file.to_string(),
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(self.err(format!(
                "truncated {what}: need {len} bytes, {} available",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn check_uids(uids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(uids.len());
    for u in uids {
        if !seen.insert(u.as_str()) {
            return Err(Error::invalid(format!("duplicate uid `{u}` in container")));
        }
        if u32::try_from(u.len()).is_err() {
            return Err(Error::invalid("uid too long"));
        }
    }
    if u32::try_from(uids.len()).is_err() {
        return Err(Error::invalid("too many samples for a container"));
    }
    Ok(())
}

fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u16")))
}

/// Optical patches, one optional `H×W×C` u8 image per uid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchContainer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub uids: Vec<String>,
    pub patches: Vec<Option<PatchImage>>,
}

impl PatchContainer {
    pub fn present_count(&self) -> usize {
        self.patches.iter().filter(|p| p.is_some()).count()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_uids(&self.uids)?;
        if self.uids.len() != self.patches.len() {
            return Err(Error::invalid("uid and patch counts differ"));
        }
        let mut payload =
            Vec::with_capacity(self.present_count() * self.height * self.width * self.channels);
        for (uid, p) in self.uids.iter().zip(&self.patches) {
            if let Some(p) = p {
                if (p.height, p.width, p.channels) != (self.height, self.width, self.channels) {
                    return Err(Error::invalid(format!(
                        "patch `{uid}` is {}x{}x{}, container is {}x{}x{}",
                        p.height, p.width, p.channels, self.height, self.width, self.channels
                    )));
                }
                payload.extend_from_slice(&p.pixels);
            }
        }
        Ok(RawContainer {
            magic: PATCH_MAGIC,
            height: dim_u16(self.height, "height")?,
            width: dim_u16(self.width, "width")?,
            channels: dim_u16(self.channels, "channels")?,
            uids: self.uids.clone(),
            presence: self.patches.iter().map(Option::is_some).collect(),
            payload,
            trailer: Vec::new(),
        }
        .encode())
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let raw = RawContainer::decode(bytes, file, PATCH_MAGIC, 1, 0)?;
        let (h, w, c) = (
            raw.height as usize,
            raw.width as usize,
            raw.channels as usize,
        );
        let size = h * w * c;
        let mut chunks = raw.payload.chunks_exact(size.max(1));
        let patches = raw
            .presence
            .iter()
            .map(|&p| {
                p.then(|| PatchImage {
                    height: h,
                    width: w,
                    channels: c,
                    pixels: if size == 0 {
                        Vec::new()
                    } else {
                        chunks.next().unwrap().to_vec()
                    },
                })
            })
            .collect();
        Ok(PatchContainer {
            height: h,
            width: w,
            channels: c,
            uids: raw.uids,
            patches,
        })
    }
}

pub fn read_patch_container(path: &Path) -> Result<PatchContainer> {
    PatchContainer::from_bytes(&read_file(path)?, &file_name(path))
}

pub fn write_patch_container(path: &Path, c: &PatchContainer) -> Result<()> {
    write_file(path, &c.to_bytes()?)
}

/// 28-day climate series per uid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClimateContainer {
    pub uids: Vec<String>,
    pub series: Vec<Option<ClimateSeries>>,
}

impl ClimateContainer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_uids(&self.uids)?;
        if self.uids.len() != self.series.len() {
            return Err(Error::invalid("uid and series counts differ"));
        }
        let mut payload = Vec::new();
        for s in self.series.iter().flatten() {
            for v in s.values() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(RawContainer {
            magic: CLIMATE_MAGIC,
            height: CLIMATE_DAYS as u16,
            width: CLIMATE_VARS as u16,
            channels: 1,
            uids: self.uids.clone(),
            presence: self.series.iter().map(Option::is_some).collect(),
            payload,
            trailer: Vec::new(),
        }
        .encode())
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let raw = RawContainer::decode(bytes, file, CLIMATE_MAGIC, 4, 0)?;
        if (raw.height as usize, raw.width as usize, raw.channels)
            != (CLIMATE_DAYS, CLIMATE_VARS, 1)
        {
            return Err(Error::Container {
                file: file.to_string(),
                offset: 10,
                message: format!(
                    "climate dims must be {CLIMATE_DAYS}x{CLIMATE_VARS}x1, got {}x{}x{}",
                    raw.height, raw.width, raw.channels
                ),
            });
        }
        let mut values = raw
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        let series = raw
            .presence
            .iter()
            .map(|&p| {
                p.then(|| {
                    let v: Vec<f32> = values.by_ref().take(CLIMATE_DAYS * CLIMATE_VARS).collect();
                    ClimateSeries::from_values(v).expect("length checked by decode")
                })
            })
            .collect();
        Ok(ClimateContainer {
            uids: raw.uids,
            series,
        })
    }
}

pub fn read_climate_container(path: &Path) -> Result<ClimateContainer> {
    ClimateContainer::from_bytes(&read_file(path)?, &file_name(path))
}

pub fn write_climate_container(path: &Path, c: &ClimateContainer) -> Result<()> {
    write_file(path, &c.to_bytes()?)
}

/// 32×32 elevation patches with the absolute altitude of each sample point.
#[derive(Debug, Clone, PartialEq)]
pub struct DemContainer {
    pub uids: Vec<String>,
    pub records: Vec<Option<ElevationRecord>>,
}

impl DemContainer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_uids(&self.uids)?;
        if self.uids.len() != self.records.len() {
            return Err(Error::invalid("uid and record counts differ"));
        }
        let mut payload = Vec::new();
        let mut trailer = Vec::new();
        for (uid, r) in self.uids.iter().zip(&self.records) {
            if let Some(r) = r {
                if r.dem.len() != DEM_SIZE * DEM_SIZE {
                    return Err(Error::invalid(format!("dem patch `{uid}` must be 32x32")));
                }
                if !r.altitude.is_finite() {
                    return Err(Error::invalid(format!("altitude of `{uid}` is not finite")));
                }
                payload.extend_from_slice(&r.dem);
                trailer.extend_from_slice(&r.altitude.to_le_bytes());
            }
        }
        Ok(RawContainer {
            magic: DEM_MAGIC,
            height: DEM_SIZE as u16,
            width: DEM_SIZE as u16,
            channels: 1,
            uids: self.uids.clone(),
            presence: self.records.iter().map(Option::is_some).collect(),
            payload,
            trailer,
        }
        .encode())
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let raw = RawContainer::decode(bytes, file, DEM_MAGIC, 1, 4)?;
        if (raw.height as usize, raw.width as usize, raw.channels) != (DEM_SIZE, DEM_SIZE, 1) {
            return Err(Error::Container {
                file: file.to_string(),
                offset: 10,
                message: format!(
                    "dem dims must be 32x32x1, got {}x{}x{}",
                    raw.height, raw.width, raw.channels
                ),
            });
        }
        let trailer_start = bytes.len() - raw.trailer.len();
        let mut dems = raw.payload.chunks_exact(DEM_SIZE * DEM_SIZE);
        let mut alts = raw.trailer.chunks_exact(4).enumerate();
        let mut records = Vec::with_capacity(raw.uids.len());
        for &p in &raw.presence {
            if !p {
                records.push(None);
                continue;
            }
            let (k, a) = alts.next().unwrap();
            let altitude = f32::from_le_bytes(a.try_into().unwrap());
            if !altitude.is_finite() {
                return Err(Error::Container {
                    file: file.to_string(),
                    offset: trailer_start + 4 * k,
                    message: "altitude is not finite".into(),
                });
            }
            records.push(Some(ElevationRecord {
                dem: dems.next().unwrap().to_vec(),
                altitude,
            }));
        }
        Ok(DemContainer {
            uids: raw.uids,
            records,
        })
    }
}

pub fn read_dem_container(path: &Path) -> Result<DemContainer> {
    DemContainer::from_bytes(&read_file(path)?, &file_name(path))
}

pub fn write_dem_container(path: &Path, c: &DemContainer) -> Result<()> {
    write_file(path, &c.to_bytes()?)
}

/// Free-form key/value notes stored next to a container, e.g. the imagery
/// acquisition window. Readers never enforce them.
pub type AcquisitionManifest = BTreeMap<String, String>;

pub fn sentinel2_acquisition_defaults() -> AcquisitionManifest {
    [
        ("source", "sentinel-2 harmonized"),
        ("bands", "B1,B2,B3,B4,B8,B11,B12"),
        ("max_days_before_sampling", "20"),
        ("max_cloud_cover_pct", "30"),
        ("aoi_size_m", "500"),
        ("patch_size_px", "64"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub fn write_acquisition_manifest(path: &Path, m: &AcquisitionManifest) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(m)?.as_bytes())
}

pub fn read_acquisition_manifest(path: &Path) -> Result<AcquisitionManifest> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metadata_row_maps_fields() {
        let csv = "uid,latitude,longitude,date,split\na1,42.5,-82.6,2024-10-10,train\n";
        let m = parse_metadata(csv.as_bytes(), "m.csv").unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].uid, "a1");
        assert_eq!(m[0].latitude, 42.5);
        assert_eq!(m[0].longitude, -82.6);
        assert_eq!(m[0].date, NaiveDate::from_ymd_opt(2024, 10, 10).unwrap());
        assert_eq!(m[0].split, Split::Train);
    }

    #[test]
    fn metadata_latitude_out_of_range_names_row_and_field() {
        let csv = "uid,latitude,longitude,date,split\na1,42.5,-82.6,2024-10-10,train\nb,95,0,2024-01-01,test\n";
        let err = parse_metadata(csv.as_bytes(), "m.csv").unwrap_err();
        match err {
            Error::Row { row, field, .. } => {
                assert_eq!(row, 2);
                assert_eq!(field, "latitude");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn metadata_header_only_is_empty() {
        let csv = "uid,latitude,longitude,date,split\n";
        assert!(parse_metadata(csv.as_bytes(), "m.csv").unwrap().is_empty());
    }

    #[test]
    fn metadata_missing_column_and_bad_date() {
        let csv = "uid,latitude,date,split\n";
        assert!(matches!(
            parse_metadata(csv.as_bytes(), "m.csv"),
            Err(Error::Row { row: 0, .. })
        ));
        let csv = "uid,latitude,longitude,date,split\na,1,1,2024-13-01,train\n";
        assert!(matches!(
            parse_metadata(csv.as_bytes(), "m.csv"),
            Err(Error::Row { ref field, .. }) if field == "date"
        ));
    }

    #[test]
    fn label_rows() {
        let csv = "uid,region,severity,density\na1,midwest,4,1200000\na3,West,1,0\n";
        let l = parse_labels(csv.as_bytes(), "l.csv", None).unwrap();
        assert_eq!(
            l[0],
            Label {
                uid: "a1".into(),
                region: Region::Midwest,
                severity: 4,
                density: 1.2e6
            }
        );
        assert_eq!(l[1].region, Region::West);
        assert_eq!(l[1].density, 0.0);

        for bad in ["a2,south,6,10", "a2,south,3,-1", "a2,pacific,3,1"] {
            let csv = format!("uid,region,severity,density\n{bad}\n");
            assert!(
                parse_labels(csv.as_bytes(), "l.csv", None).is_err(),
                "{bad}"
            );
        }
    }

    #[test]
    fn label_filter_skips_rows_unread() {
        let csv = "uid,region,severity,density\na,west,1,1\nb,nowhere,9,-5\n";
        let keep = |u: &str| u == "a";
        let l = parse_labels(csv.as_bytes(), "l.csv", Some(&keep)).unwrap();
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn external_prediction_rows() {
        let csv = "uid,fold,prediction\na1,0,181.5\na1,test,300\n";
        let p = parse_predictions(csv.as_bytes(), "p.csv", "nn").unwrap();
        assert_eq!(p.oof["a1"], (0, 181.5));
        assert_eq!(p.test["a1"], 300.0);

        let csv = "uid,fold,prediction\na1,0,NaN\n";
        assert!(parse_predictions(csv.as_bytes(), "p.csv", "nn").is_err());
        let csv = "uid,fold,prediction\na1,0,1\na1,2,1\n";
        assert!(parse_predictions(csv.as_bytes(), "p.csv", "nn").is_err());
    }

    #[test]
    fn prediction_csv_round_trip() {
        let mut p = PredictionSet::new("m");
        p.insert("x", Fold::Oof(2), 0.1 + 0.2).unwrap();
        p.insert("y", Fold::Test, 1e-300).unwrap();
        let text = predictions_to_csv(&p);
        let back = parse_predictions(text.as_bytes(), "p", "m").unwrap();
        assert_eq!(back, p);
    }

    fn patch(h: usize, w: usize, c: usize, pixels: Vec<u8>) -> PatchImage {
        PatchImage {
            height: h,
            width: w,
            channels: c,
            pixels,
        }
    }

    #[test]
    fn patch_container_byte_exact() {
        let c = PatchContainer {
            height: 2,
            width: 2,
            channels: 1,
            uids: vec!["s".into()],
            patches: vec![Some(patch(2, 2, 1, vec![0, 255, 17, 42]))],
        };
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"HABP");
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 17, 42]);
        let back = PatchContainer::from_bytes(&bytes, "t").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn all_absent_container() {
        let c = PatchContainer {
            height: 64,
            width: 64,
            channels: 7,
            uids: (0..10).map(|i| format!("u{i}")).collect(),
            patches: vec![None; 10],
        };
        let back = PatchContainer::from_bytes(&c.to_bytes().unwrap(), "t").unwrap();
        assert_eq!(back.uids.len(), 10);
        assert_eq!(back.present_count(), 0);
    }

    #[test]
    fn container_errors_carry_offsets() {
        let c = PatchContainer {
            height: 2,
            width: 2,
            channels: 1,
            uids: vec!["s".into()],
            patches: vec![Some(patch(2, 2, 1, vec![1, 2, 3, 4]))],
        };
        let bytes = c.to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            PatchContainer::from_bytes(&bad, "t"),
            Err(Error::Container { offset: 0, .. })
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            PatchContainer::from_bytes(&bad, "t"),
            Err(Error::Container { offset: 4, .. })
        ));

        let truncated = &bytes[..bytes.len() - 1];
        let err = PatchContainer::from_bytes(truncated, "t").unwrap_err();
        assert!(matches!(err, Error::Container { .. }));
        assert!(err.to_string().contains("byte"));

        // climate magic is not a patch container
        assert!(ClimateContainer::from_bytes(&bytes, "t").is_err());
    }

    #[test]
    fn huge_declared_sizes_fail_before_allocation() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"HABP");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&[0xff; 6]);
        assert!(matches!(
            PatchContainer::from_bytes(&bytes, "t"),
            Err(Error::Container { .. })
        ));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"HABP");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&[0xff; 6]);
        bytes.push(1);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'a');
        assert!(matches!(
            PatchContainer::from_bytes(&bytes, "t"),
            Err(Error::Container { .. })
        ));
    }

    #[test]
    fn climate_and_dem_round_trip() {
        let mut vals = vec![1.5f32; 140];
        vals[3] = f32::NAN;
        let c = ClimateContainer {
            uids: vec!["a".into(), "b".into()],
            series: vec![None, Some(ClimateSeries::from_values(vals).unwrap())],
        };
        let bytes = c.to_bytes().unwrap();
        let back = ClimateContainer::from_bytes(&bytes, "t").unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.series[1].as_ref().unwrap().get(0, 3).is_nan());

        let d = DemContainer {
            uids: vec!["a".into()],
            records: vec![Some(ElevationRecord {
                dem: vec![7; 1024],
                altitude: 321.5,
            })],
        };
        let bytes = d.to_bytes().unwrap();
        assert_eq!(DemContainer::from_bytes(&bytes, "t").unwrap(), d);
    }

    proptest! {
        #[test]
        fn patch_container_round_trips(
            h in 1usize..5, w in 1usize..5, c in 1usize..4,
            present in proptest::collection::vec(any::<bool>(), 0..20),
            seed in any::<u8>(),
        ) {
            let uids: Vec<String> = (0..present.len()).map(|i| format!("id-{i}-ü")).collect();
            let patches = present.iter().enumerate().map(|(i, &p)| p.then(|| {
                patch(h, w, c, (0..h * w * c).map(|k| (k as u8).wrapping_mul(seed).wrapping_add(i as u8)).collect())
            })).collect();
            let cont = PatchContainer { height: h, width: w, channels: c, uids, patches };
            let bytes = cont.to_bytes().unwrap();
            let back = PatchContainer::from_bytes(&bytes, "t").unwrap();
            prop_assert_eq!(&back.uids, &cont.uids);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
