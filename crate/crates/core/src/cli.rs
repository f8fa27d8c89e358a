//! Command-line interface. Every subcommand writes its numeric output as
//! CSV into `--out`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use crate::basis::{sample_basis_with, BasisSpec, SampleOptions};
use crate::data::{load_mnist_split, make_multiscale, synth_blobs_with, BlobConfig, LabeledDataset};
use crate::error::{Error, Result};
use crate::fit::{fit_patch_with, reconstruct_with};
use crate::gradcheck;
use crate::imageio::{read_image, write_image, write_pgm};
use crate::nn::{load_checkpoint, save_checkpoint, Layer, Model};
use crate::train::{build_model, erf_map, evaluate, second_moment, train, Arch, ConvKind, TrainConfig};

/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_DIR_ENV: &str = "NJET_DATA_DIR";

/// Exit status for a malformed command line.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for a failure while running a well-formed command.
pub const EXIT_RUNTIME: i32 = 2;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "njet", version, about = "Gaussian-derivative structured convolution with learned scale")]
struct Cli {
    /// Worker threads for batch-parallel convolution.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a basis and write one PGM per filter plus a manifest.
    Basis(BasisArgs),
    /// Compare analytic and finite-difference gradients of every layer.
    Gradcheck(GradcheckArgs),
    /// Least-squares fit of a PGM/PPM patch onto a basis.
    Fit(FitArgs),
    /// Train a network and log sigma per epoch.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write the synthesized filters of a checkpoint as PGM images.
    ExportFilters(ExportArgs),
    /// Effective receptive field of a checkpoint.
    Erf(ErfArgs),
}

#[derive(Debug, Args)]
struct BasisArgs {
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Spatial extent: filters are 2 ceil(k sigma) + 1 pixels wide.
    #[arg(long, default_value_t = 2.0)]
    k: f64,
    /// Skip the sigma^i scale normalization.
    #[arg(long)]
    unnormalized: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the CSV report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// PGM (grey) or PPM (colour) image; its centre crop is fitted.
    #[arg(long)]
    input: PathBuf,
    /// Highest order fitted; every order from 0 up is reported.
    #[arg(long, default_value_t = 3)]
    order: usize,
    /// One or more scales, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = 2.0)]
    k: f64,
    /// Patch side; defaults to the filter size of each sigma.
    #[arg(long)]
    size: Option<usize>,
    /// Rows and columns at the patch edge left out of the fit.
    #[arg(long, default_value_t = 1)]
    border: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Blobs,
    Mnist,
}

/// Where training and test images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Resize factor applied to every image.
    pub scale: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// MNIST directory; falls back to `NJET_DATA_DIR`.
    pub data_dir: Option<PathBuf>,
    /// Side of a synthetic image at scale 1.
    pub blob_size: usize,
    pub blobs: BlobConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Blobs,
            scale: 1.0,
            train_size: 2000,
            test_size: 500,
            data_dir: None,
            blob_size: 16,
            blobs: BlobConfig::noisy(),
        }
    }
}

/// Everything a training run depends on; echoed to `config.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

const TEST_SEED_SALT: u64 = 0x7e57_7e57;

impl DataConfig {
    /// `(train, test)` sets. Synthetic sets derive their seeds from `seed`.
    pub fn load(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        match self.source {
            DataSource::Blobs => Ok((
                synth_blobs_with(self.train_size, self.blob_size, self.scale, seed, &self.blobs)?,
                synth_blobs_with(self.test_size, self.blob_size, self.scale, seed ^ TEST_SEED_SALT, &self.blobs)?,
            )),
            DataSource::Mnist => {
                let dir = match &self.data_dir {
                    Some(d) => d.clone(),
                    None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                        Error::Config(format!("MNIST needs --data-dir or {DATA_DIR_ENV}"))
                    })?,
                };
                let tr = load_mnist_split(&dir, "train")?;
                let te = load_mnist_split(&dir, "t10k")?;
                let tr = tr.slice(0..self.train_size);
                let te = te.slice(0..self.test_size);
                if self.scale == 1.0 {
                    Ok((tr, te))
                } else {
                    Ok((make_multiscale(&tr, self.scale)?, make_multiscale(&te, self.scale)?))
                }
            }
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long, value_enum)]
    data: Option<DataSource>,
    /// Image resize factor.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Directory with MNIST IDX files (default: $NJET_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Synthetic image side at scale 1.
    #[arg(long)]
    blob_size: Option<usize>,
    #[arg(long)]
    blob_radius: Option<f64>,
    #[arg(long)]
    blob_noise: Option<f64>,
}

impl DataArgs {
    fn apply(&self, d: &mut DataConfig) {
        if let Some(v) = self.data {
            d.source = v;
        }
        if let Some(v) = self.scale {
            d.scale = v;
        }
        if let Some(v) = self.train_size {
            d.train_size = v;
        }
        if let Some(v) = self.test_size {
            d.test_size = v;
        }
        if let Some(v) = &self.data_dir {
            d.data_dir = Some(v.clone());
        }
        if let Some(v) = self.blob_size {
            d.blob_size = v;
        }
        if let Some(v) = self.blob_radius {
            d.blobs.radius = v;
        }
        if let Some(v) = self.blob_noise {
            d.blobs.noise = v;
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON file with `train` and `data` sections; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    /// `njet` or `standard`.
    #[arg(long)]
    conv: Option<String>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    init_sigma: Option<f64>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha_l2: Option<f64>,
    #[arg(long)]
    sigma_lr_scale: Option<f64>,
    #[arg(long)]
    subsample_r: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Seed of synthetic test data.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ErfArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test images averaged into the map.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Output position `y,x` in the trunk output; defaults to its centre.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    location: Option<Vec<usize>>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Basis(a) => cmd_basis(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Train(a) => cmd_train(a, cli.threads),
        Command::Eval(a) => cmd_eval(a, cli.threads),
        Command::ExportFilters(a) => cmd_export(a),
        Command::Erf(a) => cmd_erf(a),
    }
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ManifestRow {
    index: usize,
    i: usize,
    j: usize,
    size: usize,
    min: f64,
    max: f64,
    sum: f64,
}

fn cmd_basis(a: BasisArgs) -> Result<()> {
    let spec = BasisSpec::new(a.order, a.sigma, a.k)?;
    let opts = SampleOptions {
        normalize: !a.unnormalized,
        ..SampleOptions::default()
    };
    let basis = sample_basis_with(&spec, &opts)?;
    out_dir(&a.out)?;
    let mut rows = Vec::new();
    for (m, &(i, j)) in basis.index_map.iter().enumerate() {
        let f = basis.filter(m);
        write_pgm(&a.out.join(format!("basis_{m:02}_i{i}_j{j}.pgm")), f, true)?;
        rows.push(ManifestRow {
            index: m,
            i,
            j,
            size: basis.size(),
            min: f.iter().copied().fold(f64::INFINITY, f64::min),
            max: f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            sum: f.sum(),
        });
    }
    write_csv(&a.out.join("manifest.csv"), &rows)?;
    println!("wrote {} filters of size {} to {}", rows.len(), basis.size(), a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = gradcheck::run_all(a.seed)?;
    if let Some(out) = &a.out {
        out_dir(out)?;
        write_csv(&out.join("gradcheck.csv"), &reports)?;
    }
    let mut ok = true;
    for (layer, err) in gradcheck::worst_per_layer(&reports) {
        let pass = err < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{layer:<22} max rel err {err:.3e} {}", if pass { "ok" } else { "FAIL" });
    }
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradient check above tolerance {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

#[derive(Serialize)]
struct FitRow {
    order: usize,
    sigma: f64,
    size: usize,
    residual: f64,
    condition: f64,
    ridge: bool,
}

fn centre_crop(img: &ndarray::Array3<f64>, size: usize) -> Result<ndarray::Array3<f64>> {
    let (_, h, w) = img.dim();
    if size > h || size > w {
        return Err(Error::Shape(format!("patch of {size} px does not fit a {h}x{w} image")));
    }
    let (y0, x0) = ((h - size) / 2, (w - size) / 2);
    Ok(img.slice(s![.., y0..y0 + size, x0..x0 + size]).to_owned())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let image = read_image(&a.input)?;
    out_dir(&a.out)?;
    let mut rows = Vec::new();
    for &sigma in &a.sigma {
        for order in 0..=a.order {
            let spec = BasisSpec::new(order, sigma, a.k)?;
            let basis = sample_basis_with(&spec, &SampleOptions {
                size_override: a.size,
                ..SampleOptions::default()
            })?;
            let patch = centre_crop(&image, basis.size())?;
            let fit = fit_patch_with(patch.view(), &basis, a.border)?;
            if order == a.order {
                let recon = reconstruct_with(fit.alphas.view(), &basis)?;
                let ext = if recon.dim().0 == 3 { "ppm" } else { "pgm" };
                write_image(&a.out.join(format!("patch_sigma{sigma}.{ext}")), patch.view(), false)?;
                write_image(&a.out.join(format!("recon_order{order}_sigma{sigma}.{ext}")), recon.view(), false)?;
            }
            println!("order {order} sigma {sigma} size {} residual {:.6e}", basis.size(), fit.residual);
            rows.push(FitRow {
                order,
                sigma,
                size: basis.size(),
                residual: fit.residual,
                condition: fit.condition,
                ridge: fit.ridge,
            });
        }
    }
    write_csv(&a.out.join("fit.csv"), &rows)
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = &a.arch {
        t.arch = v.parse::<Arch>()?;
    }
    if let Some(v) = &a.conv {
        t.conv = v.parse::<ConvKind>()?;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { t.$field = v; })*
        };
    }
    set!(kernel_size => kernel_size, order => order, init_sigma => init_sigma, k => extent_k,
        epochs => epochs, lr => learning_rate, momentum => momentum, batch_size => batch_size,
        alpha_l2 => alpha_l2, sigma_lr_scale => sigma_lr_scale, seed => seed);
    if let Some(r) = a.subsample_r {
        t.subsample_r = Some(r);
    }
    a.data.apply(&mut cfg.data);
    cfg.train.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, threads: usize) -> Result<()> {
    let mut cfg = run_config(&a)?;
    cfg.train.threads = threads;
    out_dir(&a.out)?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)
        .map_err(|e| Error::io(a.out.join("config.json"), e))?;
    let (train_set, test_set) = cfg.data.load(cfg.train.seed)?;
    let model = build_model(&cfg.train, train_set.image_dims(), train_set.class_count, cfg.data.scale)?;
    let (model, trace) = train(model, &train_set, Some(&test_set), &cfg.train)?;
    trace.write_csv(&a.out.join("sigma_trace.csv"))?;
    trace.write_history_csv(&a.out.join("history.csv"))?;
    save_checkpoint(&model, &a.out.join("model.json"))?;
    for e in &trace.epochs {
        let sigmas: Vec<String> = trace
            .rows
            .iter()
            .filter(|r| r.epoch == e.epoch)
            .map(|r| format!("{:.4}", r.sigma))
            .collect();
        println!(
            "epoch {:>3} loss {:.4} accuracy {:.4} sigma [{}]",
            e.epoch,
            e.loss,
            e.accuracy,
            sigmas.join(", ")
        );
    }
    Ok(())
}

fn test_data(args: &DataArgs, seed: u64) -> Result<LabeledDataset> {
    let mut d = DataConfig::default();
    args.apply(&mut d);
    Ok(d.load(seed)?.1)
}

#[derive(Serialize)]
struct EvalRow {
    samples: usize,
    accuracy: f64,
}

fn cmd_eval(a: EvalArgs, threads: usize) -> Result<()> {
    let mut model = load_checkpoint(&a.checkpoint)?;
    let data = test_data(&a.data, a.seed)?;
    let accuracy = evaluate(&mut model, &data, threads)?;
    out_dir(&a.out)?;
    write_csv(&a.out.join("eval.csv"), &[EvalRow {
        samples: data.len(),
        accuracy,
    }])?;
    println!("accuracy {accuracy:.4} on {} samples", data.len());
    Ok(())
}

#[derive(Serialize)]
struct FilterRow {
    layer: usize,
    kind: &'static str,
    sigma: Option<f64>,
    size: usize,
    out_channels: usize,
    in_channels: usize,
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    out_dir(&a.out)?;
    let mut rows = Vec::new();
    for (idx, layer) in model.layers.iter().enumerate() {
        let (kind, sigma, filters) = match layer {
            Layer::NJet(l) => ("njet", Some(l.sigma()), l.synthesize()?.filters),
            Layer::Conv(c) => (
                "conv",
                None,
                c.weights.value.clone().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?,
            ),
            _ => continue,
        };
        let (co, ci, size, _) = filters.dim();
        for o in 0..co {
            for i in 0..ci {
                let f = filters.index_axis(Axis(0), o);
                write_pgm(&a.out.join(format!("layer{idx}_out{o:02}_in{i:02}.pgm")), f.index_axis(Axis(0), i), true)?;
            }
        }
        rows.push(FilterRow {
            layer: idx,
            kind,
            sigma,
            size,
            out_channels: co,
            in_channels: ci,
        });
    }
    write_csv(&a.out.join("filters.csv"), &rows)?;
    println!("exported {} convolution layers to {}", rows.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ErfRow {
    y: usize,
    x: usize,
    value: f64,
}

#[derive(Serialize)]
struct MomentRow {
    y: usize,
    x: usize,
    second_moment: f64,
}

fn cmd_erf(a: ErfArgs) -> Result<()> {
    let mut model: Model = load_checkpoint(&a.checkpoint)?;
    let data = test_data(&a.data, a.seed)?;
    let images = data.slice(0..a.samples.max(1)).images;
    let trunk = model.trunk_len();
    let location = match &a.location {
        Some(l) => (l[0], l[1]),
        None => {
            let out = model.forward_range(&images.slice(s![0..1, .., .., ..]).to_owned(), false, trunk)?;
            (out.dim().2 / 2, out.dim().3 / 2)
        }
    };
    let map = erf_map(&mut model, &images, location)?;
    out_dir(&a.out)?;
    write_pgm(&a.out.join("erf.pgm"), map.view(), true)?;
    let rows: Vec<ErfRow> = map
        .indexed_iter()
        .map(|((y, x), &value)| ErfRow { y, x, value })
        .collect();
    write_csv(&a.out.join("erf.csv"), &rows)?;
    let moment = second_moment(map.view());
    write_csv(&a.out.join("erf_moment.csv"), &[MomentRow {
        y: location.0,
        x: location.1,
        second_moment: moment,
    }])?;
    println!("erf at {location:?}: second moment {moment:.4}");
    Ok(())
}
