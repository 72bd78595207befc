//! Binary model files.
//!
//! Layout: 4-byte magic `FSPL`, a little-endian `u16` version, a one-byte
//! model kind, then the payload. Integers are `u64` and reals `f64`, both
//! little-endian. A matrix is `rows, cols` followed by its entries in
//! row-major order; a vector is its length followed by its entries.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::cnmf::{CnmfHyperparams, CnmfModel};
use crate::federation::{FederatedClientModel, GlobalItemModel, GlobalModel};
use crate::nmf::{RankScore, RankSelection};

pub const MAGIC: [u8; 4] = *b"FSPL";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a model file")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("expected a {expected:?} model, found kind {found}")]
    Kind { expected: ModelKind, found: u8 },
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Cnmf = 1,
    Global = 2,
    Federated = 3,
}

struct Encoder<W: Write>(W);

impl<W: Write> Encoder<W> {
    fn header(&mut self, kind: ModelKind) -> io::Result<()> {
        self.0.write_all(&MAGIC)?;
        self.0.write_all(&VERSION.to_le_bytes())?;
        self.0.write_all(&[kind as u8])
    }

    fn u64(&mut self, v: u64) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }

    fn usize(&mut self, v: usize) -> io::Result<()> {
        self.u64(v as u64)
    }

    fn f64(&mut self, v: f64) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }

    fn vector(&mut self, v: &Array1<f64>) -> io::Result<()> {
        self.usize(v.len())?;
        v.iter().try_for_each(|&x| self.f64(x))
    }

    fn reals(&mut self, v: &[f64]) -> io::Result<()> {
        self.usize(v.len())?;
        v.iter().try_for_each(|&x| self.f64(x))
    }

    fn indices(&mut self, v: &[usize]) -> io::Result<()> {
        self.usize(v.len())?;
        v.iter().try_for_each(|&x| self.usize(x))
    }

    fn matrix(&mut self, m: &Array2<f64>) -> io::Result<()> {
        self.usize(m.nrows())?;
        self.usize(m.ncols())?;
        m.iter().try_for_each(|&x| self.f64(x))
    }

    fn hyperparams(&mut self, hp: &CnmfHyperparams) -> io::Result<()> {
        self.usize(hp.k)?;
        for v in [hp.alpha, hp.beta, hp.gamma, hp.delta, hp.eta_w, hp.eta_h] {
            self.f64(v)?;
        }
        self.usize(hp.max_iters)?;
        self.u64(hp.seed)
    }

    fn items(&mut self, g: &GlobalItemModel) -> io::Result<()> {
        self.matrix(&g.w_global)?;
        self.vector(&g.b_h_global)?;
        self.f64(g.mu_global)
    }
}

/// Refuses lengths that could not possibly fit in the remaining input.
const MAX_LEN: u64 = 1 << 32;

struct Decoder<R: Read>(R);

impl<R: Read> Decoder<R> {
    fn header(&mut self, expected: ModelKind) -> Result<(), ContainerError> {
        let mut magic = [0u8; 4];
        self.0.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mut version = [0u8; 2];
        self.0.read_exact(&mut version)?;
        let version = u16::from_le_bytes(version);
        if version != VERSION {
            return Err(ContainerError::Version(version));
        }
        let mut kind = [0u8; 1];
        self.0.read_exact(&mut kind)?;
        if kind[0] != expected as u8 {
            return Err(ContainerError::Kind {
                expected,
                found: kind[0],
            });
        }
        Ok(())
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn usize(&mut self) -> Result<usize, ContainerError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| ContainerError::Corrupt(format!("value {v} too large")))
    }

    fn len(&mut self) -> Result<usize, ContainerError> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(ContainerError::Corrupt(format!("length {v}")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64, ContainerError> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn reals(&mut self) -> Result<Vec<f64>, ContainerError> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn vector(&mut self) -> Result<Array1<f64>, ContainerError> {
        Ok(Array1::from(self.reals()?))
    }

    fn indices(&mut self) -> Result<Vec<usize>, ContainerError> {
        let n = self.len()?;
        (0..n).map(|_| self.usize()).collect()
    }

    fn matrix(&mut self) -> Result<Array2<f64>, ContainerError> {
        let rows = self.len()?;
        let cols = self.len()?;
        let total = rows
            .checked_mul(cols)
            .filter(|&t| t as u64 <= MAX_LEN)
            .ok_or_else(|| ContainerError::Corrupt(format!("matrix {rows}x{cols}")))?;
        let data = (0..total).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches shape"))
    }

    fn hyperparams(&mut self) -> Result<CnmfHyperparams, ContainerError> {
        Ok(CnmfHyperparams {
            k: self.usize()?,
            alpha: self.f64()?,
            beta: self.f64()?,
            gamma: self.f64()?,
            delta: self.f64()?,
            eta_w: self.f64()?,
            eta_h: self.f64()?,
            max_iters: self.usize()?,
            seed: self.u64()?,
        })
    }

    fn items(&mut self) -> Result<GlobalItemModel, ContainerError> {
        let w_global = self.matrix()?;
        let b_h_global = self.vector()?;
        let mu_global = self.f64()?;
        if b_h_global.len() != w_global.nrows() {
            return Err(ContainerError::Corrupt("global item shapes disagree".into()));
        }
        Ok(GlobalItemModel {
            w_global,
            b_h_global,
            mu_global,
        })
    }

    fn finish(mut self) -> Result<(), ContainerError> {
        let mut rest = [0u8; 1];
        match self.0.read(&mut rest)? {
            0 => Ok(()),
            _ => Err(ContainerError::Corrupt("trailing bytes".into())),
        }
    }
}

pub fn write_cnmf<W: Write>(out: W, model: &CnmfModel) -> io::Result<()> {
    let mut e = Encoder(out);
    e.header(ModelKind::Cnmf)?;
    e.hyperparams(&model.hyperparams)?;
    e.f64(model.mu)?;
    e.matrix(&model.w)?;
    e.matrix(&model.h)?;
    e.vector(&model.b_w)?;
    e.vector(&model.b_h)
}

pub fn read_cnmf<R: Read>(input: R) -> Result<CnmfModel, ContainerError> {
    let mut d = Decoder(input);
    d.header(ModelKind::Cnmf)?;
    let model = CnmfModel {
        hyperparams: d.hyperparams()?,
        mu: d.f64()?,
        w: d.matrix()?,
        h: d.matrix()?,
        b_w: d.vector()?,
        b_h: d.vector()?,
    };
    d.finish()?;
    model
        .check_shapes()
        .map_err(|e| ContainerError::Corrupt(e.to_string()))?;
    Ok(model)
}

pub fn write_global<W: Write>(out: W, g: &GlobalModel) -> io::Result<()> {
    let mut e = Encoder(out);
    e.header(ModelKind::Global)?;
    e.items(&g.items)?;
    e.matrix(&g.h_global)?;
    e.indices(&g.group_ids)?;
    e.indices(&g.offsets)?;
    e.usize(g.rank)?;
    e.f64(g.relative_error)?;
    e.usize(g.iterations)?;
    match &g.rank_selection {
        None => e.usize(0),
        Some(sel) => {
            e.usize(sel.scores.len())?;
            for s in &sel.scores {
                e.usize(s.rank)?;
                e.reals(&s.fold_errors)?;
                e.f64(s.mean_error)?;
            }
            Ok(())
        }
    }
}

pub fn read_global<R: Read>(input: R) -> Result<GlobalModel, ContainerError> {
    let mut d = Decoder(input);
    d.header(ModelKind::Global)?;
    let items = d.items()?;
    let h_global = d.matrix()?;
    let group_ids = d.indices()?;
    let offsets = d.indices()?;
    let rank = d.usize()?;
    let relative_error = d.f64()?;
    let iterations = d.usize()?;
    let n_scores = d.len()?;
    let scores = (0..n_scores)
        .map(|_| {
            Ok(RankScore {
                rank: d.usize()?,
                fold_errors: d.reals()?,
                mean_error: d.f64()?,
            })
        })
        .collect::<Result<Vec<_>, ContainerError>>()?;
    d.finish()?;

    let consistent = offsets.len() == group_ids.len() + 1
        && offsets.first() == Some(&0)
        && offsets.windows(2).all(|w| w[0] <= w[1])
        && offsets.last() == Some(&h_global.ncols())
        && h_global.nrows() == rank
        && items.w_global.ncols() == rank;
    if !consistent {
        return Err(ContainerError::Corrupt("global model shapes disagree".into()));
    }
    Ok(GlobalModel {
        items: Arc::new(items),
        h_global,
        group_ids,
        offsets,
        rank,
        rank_selection: (!scores.is_empty()).then_some(RankSelection { rank, scores }),
        relative_error,
        iterations,
    })
}

pub fn write_federated<W: Write>(out: W, model: &FederatedClientModel) -> io::Result<()> {
    let mut e = Encoder(out);
    e.header(ModelKind::Federated)?;
    e.usize(model.group_id)?;
    e.matrix(&model.w_star)?;
    e.vector(&model.b_w)?;
    e.items(&model.global)
}

pub fn read_federated<R: Read>(input: R) -> Result<FederatedClientModel, ContainerError> {
    let mut d = Decoder(input);
    d.header(ModelKind::Federated)?;
    let group_id = d.usize()?;
    let w_star = d.matrix()?;
    let b_w = d.vector()?;
    let global = d.items()?;
    d.finish()?;
    if b_w.len() != w_star.nrows() || global.w_global.ncols() != w_star.ncols() {
        return Err(ContainerError::Corrupt("federated model shapes disagree".into()));
    }
    Ok(FederatedClientModel {
        group_id,
        w_star,
        b_w,
        global: Arc::new(global),
    })
}

pub fn save<P, T, F>(path: P, value: &T, write: F) -> io::Result<()>
where
    P: AsRef<Path>,
    F: FnOnce(&mut BufWriter<File>, &T) -> io::Result<()>,
{
    let mut out = BufWriter::new(File::create(path)?);
    write(&mut out, value)?;
    out.flush()
}

pub fn load<P, T, F>(path: P, read: F) -> Result<T, ContainerError>
where
    P: AsRef<Path>,
    F: FnOnce(BufReader<File>) -> Result<T, ContainerError>,
{
    read(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CnmfModel {
        CnmfModel {
            w: Array2::from_shape_fn((3, 2), |(i, c)| (i * 2 + c) as f64 * 0.1),
            h: Array2::from_shape_fn((2, 4), |(c, j)| (c + j) as f64 * 0.3),
            b_w: Array1::from(vec![0.1, -0.2, 0.3]),
            b_h: Array1::from(vec![-0.5, 0.0, 0.25, 1e-300]),
            mu: 3.5,
            hyperparams: CnmfHyperparams {
                seed: u64::MAX,
                ..CnmfHyperparams::default()
            },
        }
    }

    #[test]
    fn cnmf_round_trip() {
        let m = model();
        let mut buf = Vec::new();
        write_cnmf(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"FSPL");
        assert_eq!(read_cnmf(&buf[..]).unwrap(), m);
    }

    #[test]
    fn rejects_wrong_kind_and_truncation() {
        let mut buf = Vec::new();
        write_cnmf(&mut buf, &model()).unwrap();
        assert!(matches!(read_federated(&buf[..]), Err(ContainerError::Kind { .. })));
        assert!(matches!(read_cnmf(&buf[..buf.len() - 1]), Err(ContainerError::Io(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_cnmf(&extra[..]), Err(ContainerError::Corrupt(_))));
        assert!(matches!(read_cnmf(&b"nope"[..]), Err(ContainerError::BadMagic)));
        let mut newer = buf.clone();
        newer[4] = 9;
        assert!(matches!(read_cnmf(&newer[..]), Err(ContainerError::Version(9))));
    }

    #[test]
    fn global_and_federated_round_trip() {
        let items = Arc::new(GlobalItemModel {
            w_global: Array2::from_elem((4, 2), 0.5),
            b_h_global: Array1::from(vec![0.1, 0.2, 0.3, 0.4]),
            mu_global: 3.2,
        });
        let g = GlobalModel {
            items: Arc::clone(&items),
            h_global: Array2::from_shape_fn((2, 5), |(a, b)| (a + b) as f64),
            group_ids: vec![0, 1],
            offsets: vec![0, 2, 5],
            rank: 2,
            rank_selection: Some(RankSelection {
                rank: 2,
                scores: vec![RankScore {
                    rank: 2,
                    fold_errors: vec![0.1, 0.2],
                    mean_error: 0.15,
                }],
            }),
            relative_error: 0.01,
            iterations: 40,
        };
        let mut buf = Vec::new();
        write_global(&mut buf, &g).unwrap();
        assert_eq!(read_global(&buf[..]).unwrap(), g);

        let f = FederatedClientModel {
            group_id: 1,
            w_star: Array2::from_elem((3, 2), 0.25),
            b_w: Array1::from(vec![0.0, 0.1, -0.1]),
            global: items,
        };
        let mut buf = Vec::new();
        write_federated(&mut buf, &f).unwrap();
        assert_eq!(read_federated(&buf[..]).unwrap(), f);
    }
}
