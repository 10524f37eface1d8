use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AdamState, ParamSet, Tensor};

const MAGIC: &[u8; 5] = b"TSVC1";

/// Saved state of a run at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: ParamSet<f32>,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
    /// Target pseudo-labels and admission mask in effect during the last
    /// completed epoch, in target-domain file order.
    pub pseudo: Vec<(u8, bool)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                "checkpoint",
                format!("truncated at byte {}", self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = self
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", e.to_string()))
    }
}

impl Checkpoint {
    pub fn new(
        config_text: String,
        epoch: usize,
        params: &ParamSet<f32>,
        adam: &AdamState<f32>,
        pseudo: Vec<(u8, bool)>,
    ) -> Self {
        Checkpoint {
            config_text,
            epoch,
            params: params.clone(),
            adam_step: adam.step,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
            pseudo,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.epoch);
        put_u32(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, t);
        }
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        for t in self.adam_m.iter().chain(&self.adam_v) {
            put_tensor(&mut out, t);
        }
        put_u32(&mut out, self.pseudo.len());
        for &(label, mask) in &self.pseudo {
            out.push(label);
            out.push(mask as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..5] != MAGIC {
            return Err(Error::format("checkpoint", "missing TSVC1 header"));
        }
        let mut r = Reader { bytes, pos: 5 };
        let config_text = r.string()?;
        let epoch = r.u32()?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = r.string()?;
            if params.id_of(&name).is_some() {
                return Err(Error::format(
                    "checkpoint",
                    format!("duplicate parameter `{name}`"),
                ));
            }
            let t = r.tensor()?;
            params.add(name, t);
        }
        let adam_step = r.u64()?;
        let adam_m = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let adam_v = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let n = r.u32()?;
        let pseudo = r
            .take(2 * n)?
            .chunks_exact(2)
            .map(|p| (p[0], p[1] != 0))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Checkpoint {
            config_text,
            epoch,
            params,
            adam_step,
            adam_m,
            adam_v,
            pseudo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies the saved values into `params`, which must have the same names
    /// and shapes in the same order.
    pub fn restore_params(&self, params: &mut ParamSet<f32>) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::format(
                "checkpoint",
                "parameter names differ from the model",
            ));
        }
        for (dst, src) in params.tensors_mut().iter_mut().zip(self.params.tensors()) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("restore_params", dst.shape(), src.shape()));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AdamConfig;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.add(
            "a.weight",
            Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2),
        );
        params.add(
            "a.bias",
            Tensor::from_fn(&[2], |i| f32::from_bits(0x3f80_0001 + i as u32)),
        );
        let mut adam = AdamState::new(AdamConfig::default(), params.tensors());
        adam.step = 17;
        adam.m[0].data_mut()[4] = 0.5;
        adam.v[1].data_mut()[1] = 1e-9;
        Checkpoint::new(
            "seed = 1\n".into(),
            3,
            &params,
            &adam,
            vec![(2, true), (0, false)],
        )
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
        assert!(Checkpoint::from_bytes(b"TSVD1").is_err());
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Checkpoint::load(&dir.path().join("none.tsvc")),
            Err(Error::MissingCheckpoint(_))
        ));
    }
}
