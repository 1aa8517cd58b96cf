use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use mcm_core::data::folder::{ATTRIBUTES_FILE, IMAGES_DIR};
use mcm_core::data::{
    attribute_columns, gen_synthetic, load_folder, prototype_id, read_image_exact, write_folder, write_pnm,
    ConceptBank, Dataset, ImageGeometry, SyntheticSpec,
};
use mcm_core::model::{unpatchify, MaskPlan, Mcm};
use mcm_core::trainer::{
    load_checkpoint, mask_ratio_sweep, pairs_text, predict_concepts, save_checkpoint, write_log, write_sweep_csv,
    MetricsReport, Prepared, Trainer,
};
use mcm_core::{Error, Tensor};

use crate::config::{split_list, RunConfig};
use crate::{Common, DataArgs, EditArgs, EvalArgs, GenDataArgs, ReconstructArgs, SweepArgs, TrainArgs, TrainFlags};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const BANK_FILE: &str = "bank.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const MASK_FILL: f32 = 0.5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Capacity(_) => 3,
                Error::Io { .. }
                | Error::Format { .. }
                | Error::Csv(_)
                | Error::Ingestion(_)
                | Error::Integrity(_)
                | Error::Version { .. }
                | Error::Validation(_) => 4,
                Error::Numeric(_) => 5,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn prepare_out(dir: &Path, force: bool) -> CliResult {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(Error::io(path, e))
}

fn train_overrides(common: &Common, data: &DataArgs, flags: &TrainFlags) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    put("data", path(&data.data));
    put("images", path(&data.images));
    put("attributes", path(&data.attributes));
    put("concept_names", data.concepts.clone());
    put("bank", path(&data.bank));
    put("mask_ratio", flags.mask_ratio.map(|r| r.to_string()));
    put("mask_shape", flags.mask_shape.map(|s| s.as_str().to_string()));
    put("epochs", flags.epochs.map(|e| e.to_string()));
    put("steps", flags.steps.map(|s| s.to_string()));
    put("batch_size", flags.batch_size.map(|b| b.to_string()));
    put("lr", flags.lr.map(|x| x.to_string()));
    put("weight_decay", flags.weight_decay.map(|x| x.to_string()));
    put("alpha", flags.alpha.map(|x| x.to_string()));
    put("beta", flags.beta.map(|x| x.to_string()));
    put("variant", flags.variant.map(|v| v.as_str().to_string()));
    put("uniform_weights", flags.uniform_weights.then(|| "on".to_string()));
    if let Some(s) = common.seed {
        put("init_seed", Some(s.to_string()));
        put("data_seed", Some(s.wrapping_add(1).to_string()));
        put("mask_seed", Some(s.wrapping_add(2).to_string()));
    }
    out.extend(common.params.iter().cloned());
    out
}

/// Loads the dataset named by `run`, fixes the concept count and builds or
/// loads the bank.
fn load_run_data(run: &mut RunConfig) -> CliResult<(Dataset, ConceptBank)> {
    let (Some(images), Some(attributes)) = (run.images.clone(), run.attributes.clone()) else {
        return Err(CliError::Usage(
            "no training data; pass --data or --images with --attributes".into(),
        ));
    };
    let names = match &run.concept_names {
        Some(n) => n.clone(),
        None => attribute_columns(&attributes)?,
    };
    run.concept_names = Some(names.clone());
    run.model.concepts = names.len();
    run.model.validate()?;
    let data = load_folder(&images, &attributes, &names, ImageGeometry::of(&run.model))?;
    if data.is_empty() {
        return Err(Error::Ingestion(format!("no readable images listed in {}", attributes.display())).into());
    }
    let bank = match &run.bank {
        Some(path) => ConceptBank::load(path)?,
        None => ConceptBank::synthetic(&names, run.model.concept_dim, run.bank_seed)?,
    };
    data.check_bank(&bank)?;
    Ok((data, bank))
}

fn describe(run: &RunConfig) -> String {
    let m = &run.model;
    format!(
        "model: {}x{}x{} images, patch {}, N={} patches, width {}, {} encoder / {} decoder layers, {} concepts, variant {}",
        m.image_height,
        m.image_width,
        m.channels,
        m.patch,
        m.num_patches(),
        m.width,
        m.enc_layers,
        m.dec_layers(),
        m.concepts,
        m.variant.as_str()
    )
}

pub fn gen_data(args: &GenDataArgs) -> CliResult {
    let c = &args.common;
    prepare_out(&c.out, c.force)?;
    let run = RunConfig::resolve(c.preset, c.config.as_deref(), &c.params)?;
    let mut spec = SyntheticSpec::default();
    if let Some(names) = &args.concepts {
        spec.names = split_list(names);
        spec.probabilities = vec![0.5; spec.names.len()];
    }
    if let Some(p) = &args.probabilities {
        spec.probabilities = split_list(p)
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("probability {v:?} is not a number")))
            })
            .collect::<CliResult<_>>()?;
    }
    let seed = c.seed.unwrap_or(0);
    let geometry = ImageGeometry::of(&run.model);
    let data = gen_synthetic(args.n as usize, &spec, geometry, seed)?;
    write_folder(&c.out, &data)?;
    let probs: Vec<String> = spec.probabilities.iter().map(f64::to_string).collect();
    let manifest = pairs_text(&[
        ("generator", "synthetic".into()),
        ("seed", seed.to_string()),
        ("n", args.n.to_string()),
        ("image_height", geometry.height.to_string()),
        ("image_width", geometry.width.to_string()),
        ("channels", geometry.channels.to_string()),
        ("concepts", spec.names.join(",")),
        ("probabilities", probs.join(",")),
        ("images", IMAGES_DIR.into()),
        ("attributes", ATTRIBUTES_FILE.into()),
    ]);
    write_text(&c.out.join(MANIFEST_FILE), &manifest)?;
    println!("wrote {} images to {}", args.n, c.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult {
    let c = &args.common;
    prepare_out(&c.out, c.force)?;
    let mut run = RunConfig::resolve(
        c.preset,
        c.config.as_deref(),
        &train_overrides(c, &args.data, &args.flags),
    )?;
    let (data, bank) = load_run_data(&mut run)?;
    println!("{}", describe(&run));
    let mut trainer = Trainer::<f32>::new(run.model.clone(), run.train.clone())?;
    let prepared = Prepared::new(&trainer.model, &data, &bank)?;
    let total = trainer.total_steps(data.len());
    println!(
        "data: {} images ({} skipped), {} parameters, {} steps",
        data.len(),
        data.skipped,
        trainer.model.params.num_scalars(),
        total
    );
    let chunk = match run.train.eval_interval {
        0 => total.max(1),
        k => k as u64,
    };
    let mut records = Vec::new();
    while trainer.step < total {
        let log = trainer.run(&prepared, &bank, Some(chunk))?;
        if let Some(last) = log.last() {
            let l = &last.losses;
            log::info!(
                "step {}/{}: l_re {:.5} l_dis {:.5} l_concept {:.5} total {:.5}",
                last.step,
                total,
                l.re,
                l.dis,
                l.concept,
                l.total
            );
        }
        records.extend(log);
    }
    let log_path = c.out.join(LOG_FILE);
    write_log(create(&log_path)?, &records, true).map_err(io_at(&log_path))?;
    save_checkpoint(&c.out.join(CHECKPOINT_FILE), &trainer)?;
    bank.save(&c.out.join(BANK_FILE))?;
    write_text(&c.out.join(CONFIG_FILE), &run.echo())?;
    if let Some(last) = records.last() {
        let l = &last.losses;
        println!(
            "step {}: l_re {:.5} l_dis {:.5} l_concept {:.5} total {:.5}",
            last.step, l.re, l.dis, l.concept, l.total
        );
    }
    println!("checkpoint written to {}", c.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn bank_path(checkpoint: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(BANK_FILE))
}

fn folder_paths(data: &DataArgs) -> CliResult<(PathBuf, PathBuf)> {
    let images = data
        .images
        .clone()
        .or_else(|| data.data.as_ref().map(|d| d.join(IMAGES_DIR)));
    let attributes = data
        .attributes
        .clone()
        .or_else(|| data.data.as_ref().map(|d| d.join(ATTRIBUTES_FILE)));
    match (images, attributes) {
        (Some(i), Some(a)) => Ok((i, a)),
        _ => Err(CliError::Usage(
            "no data; pass --data or --images with --attributes".into(),
        )),
    }
}

pub fn eval(args: &EvalArgs) -> CliResult {
    prepare_out(&args.out, args.force)?;
    let trainer = load_checkpoint::<f32>(&args.checkpoint, None)?;
    let bank = ConceptBank::load(&bank_path(&args.checkpoint, &args.data.bank))?;
    let names = args
        .data
        .concepts
        .as_deref()
        .map(split_list)
        .unwrap_or_else(|| bank.names().to_vec());
    let (images, attributes) = folder_paths(&args.data)?;
    let data = load_folder(&images, &attributes, &names, ImageGeometry::of(trainer.model.cfg()))?;
    let test_r = args.test_mask_ratio.unwrap_or_else(|| trainer.cfg.test_ratio());
    let report = trainer.evaluate(&data, &bank, test_r, args.seed)?;
    let text = format!(
        "checkpoint   {}\ntest_mask_ratio {test_r}\n{}",
        args.checkpoint.display(),
        report.to_text(bank.names())
    );
    write_text(&args.out.join("report.txt"), &text)?;
    write_text(&args.out.join("report.csv"), &report_csv(&report, test_r, bank.names()))?;
    write_text(
        &args.out.join(CONFIG_FILE),
        &pairs_text(&[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("images", images.display().to_string()),
            ("attributes", attributes.display().to_string()),
            ("concept_names", names.join(",")),
            ("test_mask_ratio", test_r.to_string()),
            ("seed", args.seed.to_string()),
        ]),
    )?;
    print!("{text}");
    Ok(())
}

fn report_csv(report: &MetricsReport, test_r: f64, names: &[String]) -> String {
    let mut s = format!(
        "scope,test_mask_ratio,{}\nmacro,{test_r},{}\n",
        MetricsReport::csv_header(),
        report.csv_row()
    );
    for (name, c) in names.iter().zip(&report.per_concept) {
        s.push_str(&format!(
            "{name},{test_r},{},{},{},{},,,,,,\n",
            c.accuracy, c.precision, c.recall, c.f1
        ));
    }
    s
}

struct Rendered {
    masked: Tensor<f32>,
    output: Tensor<f32>,
    predicted: Vec<bool>,
    test_r: f64,
    masked_patches: usize,
}

fn render(
    args: &ReconstructArgs,
    edits: &[(usize, usize)],
    model: &Mcm<f32>,
    bank: &ConceptBank,
    test_r: f64,
) -> CliResult<Rendered> {
    let cfg = model.cfg();
    let img = read_image_exact(&args.image, ImageGeometry::of(cfg))?;
    let patches = model.patches(&[&img])?;
    let plan = MaskPlan::new(cfg.grid(), test_r, args.seed, args.mask_shape)?;
    let inf = model.infer(bank, patches.clone(), &plan, edits)?;
    let (n, d) = (cfg.num_patches(), cfg.patch_dim());
    let mut view = patches.reshape([n, d])?;
    for &z in plan.masked() {
        view.data_mut()[z * d..(z + 1) * d].fill(MASK_FILL);
    }
    let (h, w, ch, p) = (cfg.image_height, cfg.image_width, cfg.channels, cfg.patch);
    let masked = unpatchify(&view, h, w, ch, p)?;
    let output = unpatchify(&inf.recon.reshape([n, d])?, h, w, ch, p)?;
    let predicted = predict_concepts(&inf.concepts, &model.projected_bank(bank)?)?.remove(0);
    Ok(Rendered {
        masked,
        output,
        predicted,
        test_r,
        masked_patches: plan.masked().len(),
    })
}

fn run_render(args: &ReconstructArgs, sets: &[String], output_name: &str) -> CliResult {
    let trainer = load_checkpoint::<f32>(&args.checkpoint, None)?;
    let bank = ConceptBank::load(&bank_path(&args.checkpoint, &args.bank))?;
    let edits = parse_edits(sets, &bank)?;
    prepare_out(&args.out, args.force)?;
    let test_r = args.test_mask_ratio.unwrap_or_else(|| trainer.cfg.test_ratio());
    let r = render(args, &edits, &trainer.model, &bank, test_r)?;
    write_pnm(&args.out.join("masked.ppm"), &r.masked)?;
    write_pnm(&args.out.join(output_name), &r.output)?;
    let mut echo = vec![
        ("checkpoint", args.checkpoint.display().to_string()),
        ("image", args.image.display().to_string()),
        ("test_mask_ratio", r.test_r.to_string()),
        ("mask_shape", args.mask_shape.as_str().to_string()),
        ("seed", args.seed.to_string()),
    ];
    if !sets.is_empty() {
        echo.push(("set", sets.join(",")));
    }
    write_text(&args.out.join(CONFIG_FILE), &pairs_text(&echo))?;
    println!(
        "masked {} of {} patches",
        r.masked_patches,
        trainer.model.cfg().num_patches()
    );
    for (name, on) in bank.names().iter().zip(&r.predicted) {
        println!("  {name}: {}", if *on { "yes" } else { "no" });
    }
    println!("wrote {}", args.out.join(output_name).display());
    Ok(())
}

/// `concept=pos|neg` flags as `(position, prototype id)` edits.
fn parse_edits(sets: &[String], bank: &ConceptBank) -> CliResult<Vec<(usize, usize)>> {
    let mut edits: Vec<(usize, usize)> = Vec::new();
    for s in sets {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects CONCEPT=pos|neg, got {s:?}")))?;
        let positive = match value.trim() {
            "pos" | "positive" => true,
            "neg" | "negative" => false,
            other => {
                return Err(CliError::Usage(format!(
                    "--set {name}: expected pos or neg, got {other:?}"
                )))
            }
        };
        let pos = bank.concept_index(name.trim()).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown concept {:?}; the bank has: {}",
                name.trim(),
                bank.names().join(", ")
            ))
        })?;
        if edits.iter().any(|&(p, _)| p == pos) {
            return Err(CliError::Usage(format!("concept {} set more than once", name.trim())));
        }
        edits.push((pos, prototype_id(pos, positive)));
    }
    Ok(edits)
}

pub fn reconstruct(args: &ReconstructArgs) -> CliResult {
    run_render(args, &[], "reconstruction.ppm")
}

pub fn edit(args: &EditArgs) -> CliResult {
    run_render(&args.recon, &args.set, "edited.ppm")
}

pub fn sweep(args: &SweepArgs) -> CliResult {
    let c = &args.common;
    let ratios = split_list(&args.ratios)
        .iter()
        .map(|v| match v.parse::<f64>() {
            Ok(r) if (0.0..=1.0).contains(&r) => Ok(r),
            _ => Err(CliError::Usage(format!("mask ratio {v:?} is not a number in [0, 1]"))),
        })
        .collect::<CliResult<Vec<f64>>>()?;
    if ratios.is_empty() {
        return Err(CliError::Usage("--ratios is empty".into()));
    }
    prepare_out(&c.out, c.force)?;
    let mut run = RunConfig::resolve(
        c.preset,
        c.config.as_deref(),
        &train_overrides(c, &args.data, &args.flags),
    )?;
    let (data, bank) = load_run_data(&mut run)?;
    println!("{}", describe(&run));
    let test = match &args.test_data {
        Some(dir) => {
            let names = run.concept_names.clone().unwrap_or_default();
            load_folder(
                &dir.join(IMAGES_DIR),
                &dir.join(ATTRIBUTES_FILE),
                &names,
                ImageGeometry::of(&run.model),
            )?
        }
        None => data.clone(),
    };
    let rows = mask_ratio_sweep::<f32>(
        &run.model,
        &run.train,
        &data,
        &test,
        &bank,
        &ratios,
        args.test_mask_ratio,
    )?;
    let csv_path = c.out.join("sweep.csv");
    write_sweep_csv(create(&csv_path)?, &rows).map_err(io_at(&csv_path))?;
    let mut echo = run.echo();
    echo.push_str(&format!("ratios={}\n", args.ratios));
    if let Some(r) = args.test_mask_ratio {
        echo.push_str(&format!("sweep_test_mask_ratio={r}\n"));
    }
    write_text(&c.out.join(CONFIG_FILE), &echo)?;
    println!("ratio  f1      masked_psnr  epoch_s  tokens");
    for r in &rows {
        println!(
            "{:<6} {:.4}  {:>11.3}  {:>7.3}  {}",
            r.ratio, r.report.f1, r.report.masked_psnr, r.epoch_seconds, r.encoder_tokens
        );
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}
