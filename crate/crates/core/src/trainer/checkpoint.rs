//! Binary checkpoints of parameters, optimizer moments, step and configuration.
//!
//! Layout (little endian): magic `MCMCKPT\0`, `u32` version, `u8` element
//! size, `u32` config length and UTF-8 `key=value` text, `u64` trainer step,
//! `u64` optimizer step, `u32` parameter count, then for each parameter in
//! name order its name (`u16` length), rank (`u8`), `u64` dims and values,
//! then the first and second moments in the same order, and a trailing CRC32
//! of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{numel, Real, Tensor};

use super::{pairs_text, parse_pairs, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes<T: Real>(trainer: &Trainer<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE.size_bytes() as u8);
    let mut pairs: Vec<(String, String)> = Vec::new();
    pairs.extend(
        trainer
            .model
            .cfg()
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v)),
    );
    pairs.extend(
        trainer
            .cfg
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("train.{k}"), v)),
    );
    let refs: Vec<(&str, String)> = pairs.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    let text = pairs_text(&refs);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&trainer.step.to_le_bytes());
    out.extend_from_slice(&trainer.optim.step.to_le_bytes());

    let params = &trainer.model.params;
    let order = sorted_order(params.iter().map(|(n, _)| n));
    out.extend_from_slice(&(order.len() as u32).to_le_bytes());
    let entries: Vec<(&str, &Tensor<T>)> = params.iter().map(|(n, p)| (n, &p.value)).collect();
    for &i in &order {
        let (name, value) = entries[i];
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(value.rank() as u8);
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        write_values(&mut out, value);
    }
    for moments in [&trainer.optim.first, &trainer.optim.second] {
        for &i in &order {
            write_values(&mut out, &moments[i]);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint<T: Real>(path: &Path, trainer: &Trainer<T>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(trainer)).map_err(|e| Error::io(path, e))
}

/// Restores a trainer. With `expected` set, a differing model configuration
/// is a [`Error::Config`] listing every mismatched field.
pub fn load_checkpoint<T: Real>(path: &Path, expected: Option<&ModelConfig>) -> Result<Trainer<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, expected).map_err(|e| match e {
        Error::Format { reason, .. } => Error::format(path, reason),
        other => other,
    })
}

pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Trainer<T>> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format("<checkpoint>", "not a checkpoint file"));
    }
    if bytes.len() < 12 {
        return Err(Error::Integrity("checkpoint truncated in header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 17 {
        return Err(Error::Integrity("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x}); file is corrupt or truncated"
        )));
    }

    let mut r = Reader { bytes: body, at: 12 };
    let size = r.take(1)?[0] as usize;
    if size != T::DTYPE.size_bytes() {
        return Err(Error::Config(format!(
            "checkpoint holds {size}-byte floats, expected {}",
            T::DTYPE.size_bytes()
        )));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Integrity("config text is not UTF-8".into()))?;
    let pairs = parse_pairs(text)?;
    let section = |prefix: &str| -> BTreeMap<String, String> {
        pairs
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
            .collect()
    };
    let model_cfg = ModelConfig::from_pairs(&section("model."))?;
    if let Some(exp) = expected {
        let diff = exp.diff(&model_cfg);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint model configuration differs: {}",
                diff.join(", ")
            )));
        }
    }
    let mut train_cfg = TrainConfig::tiny();
    train_cfg.apply_pairs(&section("train."))?;
    let mut trainer = Trainer::<T>::new(model_cfg, train_cfg)?;
    trainer.step = r.u64()?;
    trainer.optim.step = r.u64()?;

    let count = r.u32()? as usize;
    let names: Vec<String> = trainer.model.params.iter().map(|(n, _)| n.to_string()).collect();
    let order = sorted_order(names.iter().map(String::as_str));
    if count != order.len() {
        return Err(Error::Config(format!(
            "checkpoint has {count} parameters, model has {}",
            order.len()
        )));
    }
    for &i in &order {
        let nlen = r.u16()? as usize;
        let name =
            std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?;
        if name != names[i] {
            return Err(Error::Config(format!(
                "checkpoint parameter {name}, expected {}",
                names[i]
            )));
        }
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let value = r.tensor::<T>(shape)?;
        trainer.model.params.set(name, value)?;
    }
    for which in 0..2 {
        for &i in &order {
            let shape = trainer.optim.first[i].shape().to_vec();
            let t = r.tensor::<T>(shape)?;
            if which == 0 {
                trainer.optim.first[i] = t;
            } else {
                trainer.optim.second[i] = t;
            }
        }
    }
    if r.at != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.at)));
    }
    Ok(trainer)
}

fn sorted_order<'a>(names: impl Iterator<Item = &'a str>) -> Vec<usize> {
    let names: Vec<&str> = names.collect();
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by_key(|&i| names[i]);
    order
}

fn write_values<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &x in t.data() {
        x.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Real>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let size = T::DTYPE.size_bytes();
        let n = numel(&shape);
        let raw = self.take(
            n.checked_mul(size)
                .ok_or_else(|| Error::Integrity("tensor size overflows".into()))?,
        )?;
        Tensor::new(shape, raw.chunks_exact(size).map(T::read_le).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::images::ImageGeometry;
    use crate::data::synthetic::{gen_synthetic, SyntheticSpec};
    use crate::data::{ConceptBank, Dataset};

    fn setup() -> (Trainer<f32>, Dataset, ConceptBank) {
        let mut m = ModelConfig::tiny();
        m.image_height = 12;
        m.image_width = 12;
        m.width = 16;
        m.concept_dim = 16;
        m.enc_mlp = 16;
        m.dec_mlp = 16;
        let mut t = TrainConfig::tiny();
        t.batch_size = 3;
        t.steps = Some(4);
        let spec = SyntheticSpec::default();
        let data = gen_synthetic(5, &spec, ImageGeometry::of(&m), 0).unwrap();
        let bank = ConceptBank::synthetic(&spec.names, 16, 0).unwrap();
        (Trainer::new(m, t).unwrap(), data, bank)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (mut tr, data, bank) = setup();
        let prepared = super::super::Prepared::new(&tr.model, &data, &bank).unwrap();
        tr.run(&prepared, &bank, Some(2)).unwrap();
        let a = checkpoint_bytes(&tr);
        let back = checkpoint_from_bytes::<f32>(&a, Some(tr.model.cfg())).unwrap();
        assert_eq!(back.step, 2);
        assert_eq!(checkpoint_bytes(&back), a);
    }

    #[test]
    fn resumed_run_matches_straight_run() {
        let (mut straight, data, bank) = setup();
        let prepared = super::super::Prepared::new(&straight.model, &data, &bank).unwrap();
        straight.run(&prepared, &bank, None).unwrap();

        let (mut first, _, _) = setup();
        first.run(&prepared, &bank, Some(2)).unwrap();
        let mut resumed = checkpoint_from_bytes::<f32>(&checkpoint_bytes(&first), None).unwrap();
        let rest = resumed.run(&prepared, &bank, None).unwrap();
        assert_eq!(rest.len(), 2);
        assert_eq!(checkpoint_bytes(&resumed), checkpoint_bytes(&straight));
    }

    #[test]
    fn corrupt_and_mismatched_files_are_rejected() {
        let (tr, _, _) = setup();
        let good = checkpoint_bytes(&tr);

        let mut flipped = good.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            checkpoint_from_bytes::<f32>(&flipped, None),
            Err(Error::Integrity(_))
        ));

        let truncated = &good[..good.len() - 100];
        assert!(matches!(
            checkpoint_from_bytes::<f32>(truncated, None),
            Err(Error::Integrity(_))
        ));

        let mut newer = good.clone();
        newer[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes::<f32>(&newer, None),
            Err(Error::Version { found: 2, expected: 1 })
        ));

        let mut other = tr.model.cfg().clone();
        other.heads = 2;
        match checkpoint_from_bytes::<f32>(&good, Some(&other)) {
            Err(Error::Config(msg)) => assert!(msg.contains("heads: 2 != 4"), "{msg}"),
            r => panic!("expected config error, got {:?}", r.err()),
        }

        assert!(matches!(
            checkpoint_from_bytes::<f64>(&good, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            checkpoint_from_bytes::<f32>(b"hello", None),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn files_round_trip() {
        let (tr, _, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &tr).unwrap();
        let back = load_checkpoint::<f32>(&path, None).unwrap();
        assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&tr));
        assert!(matches!(
            load_checkpoint::<f32>(&dir.path().join("none"), None),
            Err(Error::Io { .. })
        ));
    }
}
