//! `HABM` model container.
//!
//! ```text
//! magic "HABM" | version u16 | kind u8 (0 forest, 1 gbdt) | seed u64
//! | n_features u32 | params_len u32 | params (UTF-8 JSON)
//! | base_score f64 | learning_rate f64 | n_trees u32
//! | per tree: n_nodes u32, then n_nodes × node
//! node = feature i32 | threshold f64 | left i32 | right i32 | value f64
//! ```
//!
//! Nodes are in pre-order. Leaves carry `feature = left = right = -1` and a
//! zero threshold. For split nodes the `value` slot stores the split gain.

use std::path::Path;

use super::cart::{Node, Tree};
use super::{ForestModel, ForestParams, GbdtModel, GbdtParams, Model};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"HABM";
pub const MODEL_VERSION: u16 = 1;

const KIND_FOREST: u8 = 0;
const KIND_GBDT: u8 = 1;
const NODE_LEN: usize = 4 + 8 + 4 + 4 + 8;

fn i32_index(v: usize) -> i32 {
    i32::try_from(v).expect("tree index exceeds i32")
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (kind, seed, params, base, lr) = match self {
            Model::Forest(m) => (
                KIND_FOREST,
                m.seed,
                serde_json::to_string(&m.params)?,
                0.0,
                1.0,
            ),
            Model::Gbdt(m) => (
                KIND_GBDT,
                m.seed,
                serde_json::to_string(&m.params)?,
                m.base_score,
                m.learning_rate,
            ),
        };
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(kind);
        out.extend_from_slice(&seed.to_le_bytes());
        out.extend_from_slice(&(self.n_features() as u32).to_le_bytes());
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        out.extend_from_slice(params.as_bytes());
        out.extend_from_slice(&base.to_le_bytes());
        out.extend_from_slice(&lr.to_le_bytes());
        out.extend_from_slice(&(self.trees().len() as u32).to_le_bytes());
        for t in self.trees() {
            out.extend_from_slice(&(t.nodes().len() as u32).to_le_bytes());
            for n in t.nodes() {
                let (f, thr, l, r, v) = match *n {
                    Node::Leaf { value } => (-1, 0.0, -1, -1, value),
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                        gain,
                    } => (
                        i32_index(feature),
                        threshold,
                        i32_index(left),
                        i32_index(right),
                        gain,
                    ),
                };
                out.extend_from_slice(&f.to_le_bytes());
                out.extend_from_slice(&thr.to_le_bytes());
                out.extend_from_slice(&l.to_le_bytes());
                out.extend_from_slice(&r.to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            file,
        };
        if r.take(4)? != MODEL_MAGIC {
            return Err(r.err_at(0, "bad magic, expected HABM"));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let kind_at = r.pos;
        let kind = r.take(1)?[0];
        let seed = r.u64()?;
        let n_features = r.u32()? as usize;
        let plen = r.u32()? as usize;
        let params_at = r.pos;
        let params = std::str::from_utf8(r.take(plen)?)
            .map_err(|_| r.err_at(params_at, "params are not UTF-8"))?
            .to_string();
        let base_score = r.f64()?;
        let learning_rate = r.f64()?;
        let n_trees = r.u32()? as usize;
        if n_trees > r.remaining() / 4 {
            return Err(r.err(format!(
                "{n_trees} trees cannot fit in {} bytes",
                r.remaining()
            )));
        }
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let tree_at = r.pos;
            let n_nodes = r.u32()? as usize;
            if n_nodes > r.remaining() / NODE_LEN {
                return Err(r.err(format!(
                    "{n_nodes} nodes cannot fit in {} bytes",
                    r.remaining()
                )));
            }
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let at = r.pos;
                let f = r.i32()?;
                let thr = r.f64()?;
                let left = r.i32()?;
                let right = r.i32()?;
                let v = r.f64()?;
                nodes.push(match (f, left, right) {
                    (-1, -1, -1) => Node::Leaf { value: v },
                    (f, l, rr) if f >= 0 && l > 0 && rr > 0 => {
                        if f as usize >= n_features {
                            return Err(r.err_at(at, format!("feature {f} out of range")));
                        }
                        Node::Split {
                            feature: f as usize,
                            threshold: thr,
                            left: l as usize,
                            right: rr as usize,
                            gain: v,
                        }
                    }
                    _ => return Err(r.err_at(at, "malformed node")),
                });
            }
            trees.push(Tree::from_nodes(nodes).map_err(|e| r.err_at(tree_at, e.to_string()))?);
        }
        if r.remaining() != 0 {
            return Err(r.err(format!("{} trailing bytes", r.remaining())));
        }
        let bad_params = |e: serde_json::Error| r.err_at(params_at, format!("bad params: {e}"));
        match kind {
            KIND_FOREST => Ok(Model::Forest(ForestModel {
                trees,
                n_features,
                params: serde_json::from_str::<ForestParams>(&params).map_err(bad_params)?,
                seed,
            })),
            KIND_GBDT => Ok(Model::Gbdt(GbdtModel {
                trees,
                base_score,
                learning_rate,
                n_features,
                params: serde_json::from_str::<GbdtParams>(&params).map_err(bad_params)?,
                seed,
            })),
            k => Err(r.err_at(kind_at, format!("unknown model kind {k}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn err(&self, m: impl Into<String>) -> Error {
        self.err_at(self.pos, m)
    }

    fn err_at(&self, offset: usize, m: impl Into<String>) -> Error {
        Error::Container {
            file: self.file.to_string(),
            offset,
            message: m.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes, {} available",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::{fit_forest, fit_gbdt, Matrix};

    fn data() -> (Matrix, Vec<f64>) {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![i as f64, (i % 4) as f64, -999.0])
            .collect();
        let y = rows.iter().map(|r| r[0].sin() + r[1]).collect();
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn forest_and_gbdt_round_trip() {
        let (x, y) = data();
        let f = Model::Forest(
            fit_forest(
                &x,
                &y,
                &[1.0; 30],
                &ForestParams {
                    n_estimators: 4,
                    ..Default::default()
                },
                5,
            )
            .unwrap(),
        );
        let g = Model::Gbdt(
            fit_gbdt(
                &x,
                &y,
                &[1.0; 30],
                &GbdtParams {
                    rounds: 7,
                    ..Default::default()
                },
                5,
            )
            .unwrap(),
        );
        for m in [f, g] {
            let bytes = m.to_bytes().unwrap();
            let back = Model::from_bytes(&bytes, "m").unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
            assert_eq!(back.feature_importance(), m.feature_importance());
        }
    }

    #[test]
    fn corrupt_model_is_rejected() {
        let (x, y) = data();
        let m = Model::Gbdt(
            fit_gbdt(
                &x,
                &y,
                &[1.0; 30],
                &GbdtParams {
                    rounds: 2,
                    ..Default::default()
                },
                0,
            )
            .unwrap(),
        );
        let bytes = m.to_bytes().unwrap();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3], "m").is_err());
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(
            Model::from_bytes(&bad, "m"),
            Err(Error::Container { offset: 6, .. })
        ));
        let mut bad = bytes;
        bad[0] = b'Z';
        assert!(Model::from_bytes(&bad, "m").is_err());
    }
}
