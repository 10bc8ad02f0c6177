//! Seeded synthetic datasets: metadata, labels, binary containers and the
//! derived feature table. The square-root density is a noiseless linear
//! function of latitude; regions are longitude bands. Each sample first
//! draws a severity in 1..=4, then a latitude from the middle 60% of that
//! class's latitude band, so classes are separated by gaps.

use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featurize::{
    build_feature_table, ClimateSeries, ElevationRecord, FeatureTable, ImputationMode, PatchImage,
    CLIMATE_DAYS, CLIMATE_VARS, DEM_SIZE, N_CHANNELS, RAW_PATCH_SIZE,
};
use crate::ingest::{
    write_climate_container, write_dem_container, write_patch_container, ClimateContainer,
    DemContainer, PatchContainer,
};
use crate::model::{Label, Region, SampleMeta, Split};

/// Density class boundaries (cells/mL) for severities 2..5.
pub const DENSITY_CLASS_BOUNDS: [f64; 4] = [20_000.0, 100_000.0, 1_000_000.0, 10_000_000.0];

pub fn severity_of_density(density: f64) -> u8 {
    1 + DENSITY_CLASS_BOUNDS
        .iter()
        .filter(|&&b| density >= b)
        .count() as u8
}

/// Square-root density as a function of latitude.
pub fn sqrt_density_at(latitude: f64) -> f64 {
    10.0 + 125.0 * (latitude - 25.0)
}

fn latitude_at(sqrt_density: f64) -> f64 {
    25.0 + (sqrt_density - 10.0) / 125.0
}

/// Latitude band of severity `class` (1..=4) between 25 and 49 degrees.
pub fn class_latitude_band(class: u8) -> (f64, f64) {
    let lo = if class == 1 {
        25.0
    } else {
        latitude_at(DENSITY_CLASS_BOUNDS[class as usize - 2].sqrt())
    };
    let hi = if class == 4 {
        49.0
    } else {
        latitude_at(DENSITY_CLASS_BOUNDS[class as usize - 1].sqrt())
    };
    (lo, hi)
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub metas: Vec<SampleMeta>,
    /// Labels for every uid, test rows included.
    pub labels: Vec<Label>,
    pub patches: PatchContainer,
    pub climate: ClimateContainer,
    pub dem: DemContainer,
}

#[derive(Debug, Clone)]
pub struct SyntheticPaths {
    pub metadata: PathBuf,
    pub labels: PathBuf,
    pub features: PathBuf,
    pub patches: PathBuf,
    pub climate: PathBuf,
    pub dem: PathBuf,
}

impl SyntheticDataset {
    /// `n_train` training and `n_test` test samples. About one in eight
    /// samples lacks a patch and one in ten lacks climate data.
    pub fn generate(n_train: usize, n_test: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_train + n_test;
        let start = NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date");
        let mut metas = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut patches = Vec::with_capacity(n);
        let mut series = Vec::with_capacity(n);
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let uid = format!("s{i:05}");
            let band = i % 4;
            let longitude = -124.0 + 13.5 * (band as f64 + rng.gen_range(0.05..0.95));
            let (lo, hi) = class_latitude_band(rng.gen_range(1..=4));
            let latitude = lo + (hi - lo) * rng.gen_range(0.2..0.8);
            let region = [
                Region::West,
                Region::Midwest,
                Region::South,
                Region::Northeast,
            ][band];
            let date = start + Duration::days(rng.gen_range(0..1500));
            let split = if i < n_train {
                Split::Train
            } else {
                Split::Test
            };
            let density = sqrt_density_at(latitude).powi(2);
            metas.push(SampleMeta {
                uid: uid.clone(),
                latitude,
                longitude,
                date,
                split,
            });
            labels.push(Label {
                uid,
                region,
                severity: severity_of_density(density),
                density,
            });

            patches.push((rng.gen_range(0..8) != 0).then(|| {
                let base: [u8; N_CHANNELS] = std::array::from_fn(|_| rng.gen_range(20..200));
                let mut px = Vec::with_capacity(RAW_PATCH_SIZE * RAW_PATCH_SIZE * N_CHANNELS);
                for _ in 0..RAW_PATCH_SIZE * RAW_PATCH_SIZE {
                    for b in base {
                        px.push(b.saturating_add(rng.gen_range(0..40)));
                    }
                }
                PatchImage::new(RAW_PATCH_SIZE, RAW_PATCH_SIZE, N_CHANNELS, px).expect("sized")
            }));
            series.push((rng.gen_range(0..10) != 0).then(|| {
                let v: Vec<f32> = (0..CLIMATE_DAYS * CLIMATE_VARS)
                    .map(|k| match k % CLIMATE_VARS {
                        0 => rng.gen_range(260.0..305.0),
                        1 => rng.gen_range(0.0..0.02),
                        2 => rng.gen_range(0.0..25.0),
                        3 => rng.gen_range(0.0..1.0),
                        _ => rng.gen_range(5000.0..5900.0),
                    })
                    .collect();
                ClimateSeries::from_values(v).expect("sized")
            }));
            records.push(Some(ElevationRecord {
                dem: (0..DEM_SIZE * DEM_SIZE).map(|_| rng.gen()).collect(),
                altitude: rng.gen_range(0.0..2500.0),
            }));
        }
        let uids: Vec<String> = metas.iter().map(|m| m.uid.clone()).collect();
        SyntheticDataset {
            metas,
            labels,
            patches: PatchContainer {
                height: RAW_PATCH_SIZE,
                width: RAW_PATCH_SIZE,
                channels: N_CHANNELS,
                uids: uids.clone(),
                patches,
            },
            climate: ClimateContainer {
                uids: uids.clone(),
                series,
            },
            dem: DemContainer { uids, records },
        }
    }

    pub fn feature_table(&self, mode: ImputationMode) -> Result<FeatureTable> {
        build_feature_table(
            &self.metas,
            Some(&self.patches),
            Some(&self.climate),
            Some(&self.dem),
            mode,
        )
    }

    pub fn metadata_csv(&self) -> String {
        let mut s = String::from("uid,latitude,longitude,date,split\n");
        for m in &self.metas {
            let split = match m.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            s.push_str(&format!(
                "{},{},{},{},{split}\n",
                m.uid,
                m.latitude,
                m.longitude,
                m.date.format("%Y-%m-%d")
            ));
        }
        s
    }

    pub fn labels_csv(&self) -> String {
        let mut s = String::from("uid,region,severity,density\n");
        for l in &self.labels {
            s.push_str(&format!(
                "{},{},{},{}\n",
                l.uid, l.region, l.severity, l.density
            ));
        }
        s
    }

    /// Writes every input file into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<SyntheticPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = SyntheticPaths {
            metadata: dir.join("metadata.csv"),
            labels: dir.join("labels.csv"),
            features: dir.join("features.csv"),
            patches: dir.join("patches.habp"),
            climate: dir.join("climate.habc"),
            dem: dir.join("dem.habd"),
        };
        let write =
            |path: &Path, s: String| std::fs::write(path, s).map_err(|e| Error::io(path, e));
        write(&p.metadata, self.metadata_csv())?;
        write(&p.labels, self.labels_csv())?;
        write(
            &p.features,
            self.feature_table(ImputationMode::Off)?.to_csv(),
        )?;
        write_patch_container(&p.patches, &self.patches)?;
        write_climate_container(&p.climate, &self.climate)?;
        write_dem_container(&p.dem, &self.dem)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{IDX_LOCATION, N_FEATURES};
    use crate::model::SENTINEL;

    #[test]
    fn severity_bins() {
        assert_eq!(severity_of_density(0.0), 1);
        assert_eq!(severity_of_density(20_000.0), 2);
        assert_eq!(severity_of_density(99_999.0), 2);
        assert_eq!(severity_of_density(1e6), 4);
        assert_eq!(severity_of_density(2e7), 5);
        for c in 1..=4u8 {
            let (lo, hi) = class_latitude_band(c);
            let mid = sqrt_density_at(0.5 * (lo + hi)).powi(2);
            assert_eq!(severity_of_density(mid), c);
        }
    }

    #[test]
    fn generation_is_seeded_and_complete() {
        let a = SyntheticDataset::generate(40, 10, 3);
        let b = SyntheticDataset::generate(40, 10, 3);
        assert_eq!(a.metadata_csv(), b.metadata_csv());
        assert_eq!(a.patches, b.patches);
        for r in Region::ALL {
            assert!(a.labels[..40].iter().any(|l| l.region == r));
        }
        let t = a.feature_table(ImputationMode::Off).unwrap();
        assert_eq!(t.len(), 50);
        for (row, l) in t.rows.iter().zip(&a.labels) {
            assert_eq!(row.0.len(), N_FEATURES);
            assert!((sqrt_density_at(row.0[IDX_LOCATION]) - l.density.sqrt()).abs() < 1e-6);
        }
        assert!(t.sentinel_count() > 0);
        assert!(t.rows.iter().all(|r| r.0[IDX_LOCATION] != SENTINEL));
    }
}
