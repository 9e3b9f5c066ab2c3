//! Binary checkpoint of a trained model, little-endian throughout.
//!
//! Layout: magic `GPTFCKPT`, version `u32`, mode `u8` (0 continuous,
//! 1 binary), `K: u32`, dims `K × u64`, ranks `K × u32`, `p: u32`,
//! jitter `f64`, flat length `u64` and the flat parameters as `f64`,
//! `λ` (`p × f64`, binary only), then a `u8` flag and, when set, the
//! training statistics `A1` (`p²`, column-major), `a2`, `a3`, `a4` (`p`),
//! `n: u64`. Continuous prediction needs the statistics.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::elbo::SufficientStats;
use crate::error::{Error, Result};
use crate::model::{unpack, FlatParams, Likelihood, ModelState, Mode, ParamLayout};

const MAGIC: &[u8; 8] = b"GPTFCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub stats: Option<SufficientStats>,
}

pub fn write_checkpoint<W: Write>(state: &ModelState, stats: Option<&SufficientStats>, mut out: W) -> Result<()> {
    state.validate()?;
    let layout = state.layout();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[match state.mode() {
        Mode::Continuous => 0u8,
        Mode::Binary => 1u8,
    }])?;
    out.write_all(&(layout.dims().len() as u32).to_le_bytes())?;
    for &d in layout.dims() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &r in layout.ranks() {
        out.write_all(&(r as u32).to_le_bytes())?;
    }
    out.write_all(&(layout.num_inducing() as u32).to_le_bytes())?;
    out.write_all(&state.jitter.to_le_bytes())?;
    let flat = state.pack().values;
    out.write_all(&(flat.len() as u64).to_le_bytes())?;
    write_f64s(&mut out, &flat)?;
    if let Likelihood::Probit { lambda } = &state.likelihood {
        write_f64s(&mut out, lambda.as_slice())?;
    }
    match stats {
        None => out.write_all(&[0u8])?,
        Some(s) => {
            if s.num_inducing() != layout.num_inducing() {
                return Err(Error::DimensionMismatch { expected: layout.num_inducing(), got: s.num_inducing() });
            }
            out.write_all(&[1u8])?;
            write_f64s(&mut out, s.a1.as_slice())?;
            write_f64s(&mut out, &[s.a2, s.a3])?;
            write_f64s(&mut out, s.a4.as_slice())?;
            out.write_all(&(s.n as u64).to_le_bytes())?;
        }
    }
    Ok(())
}

fn write_f64s<W: Write>(out: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn usize64(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = Reader { inner: input };
    if &r.bytes::<8>("magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mode = match r.u8("mode")? {
        0 => Mode::Continuous,
        1 => Mode::Binary,
        m => return Err(Error::Checkpoint(format!("unknown mode tag {m}"))),
    };
    let k = r.u32("mode count")? as usize;
    if !(2..=64).contains(&k) {
        return Err(Error::Checkpoint(format!("implausible mode count {k}")));
    }
    let dims = (0..k).map(|_| r.usize64("dims")).collect::<Result<Vec<_>>>()?;
    let ranks = (0..k).map(|_| r.u32("ranks").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let p = r.u32("inducing count")? as usize;
    if p == 0 || dims.contains(&0) || ranks.contains(&0) {
        return Err(Error::Checkpoint("zero-sized dimension".into()));
    }
    let jitter = r.f64("jitter")?;
    let layout = ParamLayout::new(dims, ranks, p, mode);
    let len = r.usize64("flat length")?;
    if len != layout.len() {
        return Err(Error::Checkpoint(format!("flat length {len} does not match header ({})", layout.len())));
    }
    let values = r.f64s(len, "parameters")?;
    let mut state = unpack(&FlatParams { values, layout })?;
    state.jitter = jitter;
    if mode == Mode::Binary {
        state.likelihood = Likelihood::Probit { lambda: DVector::from_vec(r.f64s(p, "lambda")?) };
    }
    let stats = match r.u8("stats flag")? {
        0 => None,
        1 => {
            let a1 = DMatrix::from_vec(p, p, r.f64s(p * p, "A1")?);
            let a2 = r.f64("a2")?;
            let a3 = r.f64("a3")?;
            let a4 = DVector::from_vec(r.f64s(p, "a4")?);
            let n = r.usize64("entry count")?;
            let mut s = SufficientStats::zeros(p);
            s.a1 = a1;
            s.a2 = a2;
            s.a3 = a3;
            s.a4 = a4;
            s.n = n;
            Some(s)
        }
        f => return Err(Error::Checkpoint(format!("bad stats flag {f}"))),
    };
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { state, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elbo::compute_stats;
    use crate::model::init_state;
    use crate::sptensor::EntryBatch;

    fn round_trip(state: &ModelState, stats: Option<&SufficientStats>) -> Checkpoint {
        let mut buf = Vec::new();
        write_checkpoint(state, stats, &mut buf).unwrap();
        read_checkpoint(&buf[..]).unwrap()
    }

    #[test]
    fn exact_round_trip_both_modes() {
        let mut c = init_state(&[5, 4, 3], &[2, 1, 3], 4, Mode::Continuous, 11).unwrap();
        c.likelihood = Likelihood::Gaussian { log_precision: 0.1234567890123 };
        c.jitter = 1e-9;
        let mut b = EntryBatch::new(3);
        b.push(&[1, 2, 0], 0.5);
        b.push(&[4, 0, 2], -1.5);
        let st = compute_stats(&b, &c).unwrap();
        let back = round_trip(&c, Some(&st));
        assert_eq!(back.state, c);
        let back_stats = back.stats.unwrap();
        assert_eq!(back_stats.a1, st.a1);
        assert_eq!((back_stats.a2, back_stats.a3, back_stats.n), (st.a2, st.a3, st.n));

        let bin = init_state(&[3, 3], &[1, 1], 2, Mode::Binary, 1)
            .unwrap()
            .with_lambda(DVector::from_vec(vec![0.1, -7.25e-3]))
            .unwrap();
        let back = round_trip(&bin, None);
        assert_eq!(back.state, bin);
        assert!(back.stats.is_none());
    }

    #[test]
    fn rejects_corruption() {
        let s = init_state(&[3, 3], &[1, 1], 2, Mode::Continuous, 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, None, &mut buf).unwrap();
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_checkpoint(&long[..]).is_err());
    }
}
