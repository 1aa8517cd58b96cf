//! Training and evaluating the same model at several mask ratios.

use std::io::Write;
use std::time::Instant;

use crate::data::{ConceptBank, Dataset};
use crate::error::Result;
use crate::model::{masked_count, ModelConfig};
use crate::tensor::Real;

use super::{MetricsReport, Prepared, TrainConfig, Trainer};

pub const SWEEP_HEADER: &str =
    "ratio,accuracy,precision,recall,f1,masked_mse,masked_psnr,train_seconds,epoch_seconds,encoder_tokens";

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub ratio: f64,
    pub test_ratio: f64,
    pub report: MetricsReport,
    pub train_seconds: f64,
    /// Training time per pass over the data.
    pub epoch_seconds: f64,
    /// Visible patches plus concept tokens per encoder layer.
    pub encoder_tokens: usize,
}

/// Trains one model per ratio from the same seeds and evaluates it on `test`.
/// The evaluation ratio is `test_ratio`, or the training ratio when unset.
pub fn mask_ratio_sweep<T: Real>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    bank: &ConceptBank,
    ratios: &[f64],
    test_ratio: Option<f64>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut cfg = train_cfg.clone();
        cfg.mask_ratio = ratio;
        let mut trainer = Trainer::<T>::new(model_cfg.clone(), cfg)?;
        let prepared = Prepared::new(&trainer.model, train, bank)?;
        let start = Instant::now();
        let log = trainer.run(&prepared, bank, None)?;
        let train_seconds = start.elapsed().as_secs_f64();
        let epochs = log.len() as f64 / trainer.steps_per_epoch(train.len()) as f64;
        let test_r = test_ratio.unwrap_or(ratio);
        let report = trainer.evaluate(test, bank, test_r, train_cfg.mask_seed ^ 0x5eed)?;
        let n = model_cfg.num_patches();
        log::info!(
            "ratio {ratio}: f1 {:.4}, masked psnr {:.2}, {train_seconds:.2}s",
            report.f1,
            report.masked_psnr
        );
        rows.push(SweepRow {
            ratio,
            test_ratio: test_r,
            report,
            train_seconds,
            epoch_seconds: if epochs > 0.0 { train_seconds / epochs } else { 0.0 },
            encoder_tokens: n - masked_count(n, ratio) + model_cfg.concepts,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(mut w: impl Write, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        let m = &r.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:.3},{:.3},{}",
            r.ratio,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            m.masked_mse,
            m.masked_psnr,
            r.train_seconds,
            r.epoch_seconds,
            r.encoder_tokens
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::images::ImageGeometry;
    use crate::data::synthetic::{gen_synthetic, SyntheticSpec};

    #[test]
    fn one_row_per_ratio() {
        let mut m = ModelConfig::tiny();
        m.image_height = 12;
        m.image_width = 12;
        m.width = 16;
        m.concept_dim = 16;
        m.enc_mlp = 16;
        m.dec_mlp = 16;
        let mut t = TrainConfig::tiny();
        t.steps = Some(1);
        t.batch_size = 4;
        let spec = SyntheticSpec::default();
        let data = gen_synthetic(4, &spec, ImageGeometry::of(&m), 0).unwrap();
        let bank = ConceptBank::synthetic(&spec.names, 16, 0).unwrap();
        let rows = mask_ratio_sweep::<f32>(&m, &t, &data, &data, &bank, &[0.0, 0.5, 0.75], None).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.iter().map(|r| r.encoder_tokens).collect::<Vec<_>>(), vec![8, 6, 5]);
        assert_eq!(rows[1].test_ratio, 0.5);
        let mut out = Vec::new();
        write_sweep_csv(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with(SWEEP_HEADER));
    }
}
