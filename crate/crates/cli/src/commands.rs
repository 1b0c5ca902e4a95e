//! Pipeline commands. Each returns a serializable report; file outputs are
//! written next to it.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tvbi::data::BlobsSpec;
use tvbi::nn::{self, read_weights, Dataset, LikelihoodModel, NetworkDef, Weights, WeightsFile};
use tvbi::prior::{sample_support, MrfParams, SupportMatrix};
use tvbi::sparse::{self, bench_csv, index_coding_gain, BlockSparseMatrix, CooMatrix};
use tvbi::turbo::{flops_count, plain_vbi_run, turbo_run, IterationReport, PruneResult, TraceRow};
use tvbi::vbi::VariationalPosterior;

use crate::config::{DatasetSpec, RunConfig};
use crate::idx::load_idx;
use crate::pgm::{from_pgm, to_pgm};
use crate::CliError;

pub const TRACE_HEADER: &str = "iter,max_msg_delta,neg_elbo_surrogate,sparsity,accuracy";

/// Summary metrics of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub accuracy_pct: f64,
    /// Nonzero weights over all weights, in percent.
    pub sparsity_pct: f64,
    /// Surviving neurons per layer, input first.
    pub pruned_structure: Vec<usize>,
    pub flops_reduction_pct: f64,
    pub runtime_s: f64,
}

/// `metrics.json` written by `prune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub metrics: MetricsRow,
    /// Accuracy of the thresholded posterior mean before fine-tuning.
    pub map_accuracy_pct: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_msg_delta: f64,
    pub spmp_unconverged: usize,
}

/// Per-layer storage comparison written by `export`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportLayer {
    pub layer: usize,
    pub file: PathBuf,
    pub blocks: usize,
    pub residual: usize,
    pub nnz: usize,
    pub coo_index_ints: usize,
    pub block_index_ints: usize,
    pub index_coding_gain: f64,
    pub block_bytes: usize,
}

pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    match &cfg.dataset {
        DatasetSpec::Blobs { train, test, separation } => {
            Ok(BlobsSpec { train: *train, test: *test, separation: *separation }.generate(cfg.data_seed())?)
        }
        DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            Ok((train, test))
        }
    }
}

fn check_dataset(net: &NetworkDef, data: &Dataset) -> Result<(), CliError> {
    if data.input_dim() != net.input_size() {
        return Err(CliError::Config(format!(
            "dataset has {} inputs, network expects {}",
            data.input_dim(),
            net.input_size()
        )));
    }
    if let nn::Targets::Labels(l) = data.targets() {
        if let Some(&max) = l.iter().max() {
            if max >= net.output_size() {
                return Err(CliError::Config(format!("label {max} needs more than {} outputs", net.output_size())));
            }
        }
    }
    Ok(())
}

pub fn read_weights_file(path: &Path) -> Result<WeightsFile, CliError> {
    let mut f = fs::File::open(path).map_err(tvbi::Error::from)?;
    Ok(read_weights(&mut f)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(tvbi::Error::from)?;
    }
    fs::write(path, bytes).map_err(tvbi::Error::from)?;
    Ok(())
}

/// Accuracy, sparsity and FLOPs of `w` on `test`.
pub fn metrics(net: &NetworkDef, w: &Weights, test: &Dataset, started: Instant) -> Result<MetricsRow, CliError> {
    let flops = flops_count(net, &w.nonzero_masks())?;
    Ok(MetricsRow {
        accuracy_pct: 100.0 * nn::accuracy(net, w, test)?,
        sparsity_pct: 100.0 * w.nonzero_weights() as f64 / w.weight_count() as f64,
        pruned_structure: flops.structure.clone(),
        flops_reduction_pct: flops.reduction_pct(),
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

/// Trains the dense baseline and writes it to `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<MetricsRow, CliError> {
    let started = Instant::now();
    let net = cfg.net()?;
    let (train, test) = load_data(cfg)?;
    check_dataset(&net, &train)?;
    let mut w = Weights::init(&net, cfg.init_seed());
    nn::sgd_train(&net, &mut w, &train, &LikelihoodModel::Classification, &cfg.train_sgd(), None)?;
    write_file(out, &WeightsFile { weights: w.clone(), posterior: None }.to_bytes())?;
    metrics(&net, &w, &test, started)
}

fn trace_line(r: &TraceRow) -> String {
    format!("{},{},{},{},{}\n", r.iter, r.max_msg_delta, r.neg_elbo_surrogate, r.sparsity, r.accuracy)
}

/// Runs the turbo loop (or, with `plain`, one variational pass under the
/// fixed initial support prior) on the weights in `weights` and writes
/// `pruned.tvbi`, `trace.csv`, `masks/layer<l>.pgm` and `metrics.json`
/// into `out_dir`.
pub fn cmd_prune(cfg: &RunConfig, weights: &Path, out_dir: &Path, plain: bool) -> Result<PruneReport, CliError> {
    let started = Instant::now();
    let net = cfg.net()?;
    let init = read_weights_file(weights)?.weights;
    init.check(&net)?;
    let (train, test) = load_data(cfg)?;
    check_dataset(&net, &train)?;
    let prior = cfg.prior(&net)?;
    let turbo = cfg.turbo();
    let model = LikelihoodModel::Classification;

    fs::create_dir_all(out_dir.join("masks")).map_err(tvbi::Error::from)?;
    let mut trace = fs::File::create(out_dir.join("trace.csv")).map_err(tvbi::Error::from)?;
    writeln!(trace, "{TRACE_HEADER}").map_err(tvbi::Error::from)?;

    let (posterior, result, iterations, converged, final_delta, spmp_unconverged): (
        VariationalPosterior,
        PruneResult,
        usize,
        bool,
        f64,
        usize,
    ) = if plain {
        let (post, result) = plain_vbi_run(&net, &init, &train, &prior, &model, &turbo)?;
        (post, result, 1, true, 0.0, 0)
    } else {
        let mut io_err = None;
        let observer = |r: IterationReport<'_>| {
            let mut write = || -> std::io::Result<()> {
                trace.write_all(trace_line(r.row).as_bytes())?;
                trace.flush()?;
                if cfg.dump_masks {
                    for (l, m) in r.masks.iter().enumerate() {
                        fs::write(out_dir.join("masks").join(format!("iter{:02}_layer{l}.pgm", r.row.iter)), to_pgm(m))?;
                    }
                }
                Ok(())
            };
            if let Err(e) = write() {
                io_err.get_or_insert(e);
            }
        };
        let (state, result) = turbo_run(&net, &init, &train, Some(&test), &prior, &model, &turbo, observer)?;
        if let Some(e) = io_err {
            return Err(tvbi::Error::from(e).into());
        }
        let delta = state.trace.last().map_or(f64::NAN, |r| r.max_msg_delta);
        (state.posterior, result, state.iteration, state.converged, delta, state.spmp_unconverged)
    };

    let file = WeightsFile { weights: result.weights.clone(), posterior: Some(posterior.to_arrays()) };
    write_file(&out_dir.join("pruned.tvbi"), &file.to_bytes())?;
    for (l, m) in result.masks.iter().enumerate() {
        write_file(&out_dir.join("masks").join(format!("layer{l}.pgm")), to_pgm(m).as_bytes())?;
    }
    let mut row = metrics(&net, &result.weights, &test, started)?;
    row.sparsity_pct = 100.0 * result.sparsity;
    row.pruned_structure = result.flops.structure.clone();
    row.flops_reduction_pct = result.flops.reduction_pct();
    let report = PruneReport {
        map_accuracy_pct: 100.0 * nn::accuracy(&net, &result.map_weights, &test)?,
        metrics: row,
        iterations,
        converged,
        final_msg_delta: final_delta,
        spmp_unconverged,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out_dir.join("metrics.json"), json.as_bytes())?;
    Ok(report)
}

/// Evaluates a weights file on the held-out split. When `tvbs` is given,
/// layer `l`'s matrix is replaced by the decoded `tvbs[l]`.
pub fn cmd_eval(cfg: &RunConfig, weights: &Path, tvbs: &[PathBuf]) -> Result<MetricsRow, CliError> {
    let started = Instant::now();
    let net = cfg.net()?;
    let mut w = read_weights_file(weights)?.weights;
    w.check(&net)?;
    if !tvbs.is_empty() {
        if tvbs.len() != w.layers.len() {
            return Err(CliError::Config(format!("{} tvbs files for {} layers", tvbs.len(), w.layers.len())));
        }
        for (layer, path) in w.layers.iter_mut().zip(tvbs) {
            let bsm = BlockSparseMatrix::from_bytes(&fs::read(path).map_err(tvbi::Error::from)?)?;
            if bsm.dims() != (layer.fan_in, layer.fan_out) {
                return Err(tvbi::Error::Format(format!("{} has dims {:?}", path.display(), bsm.dims())).into());
            }
            layer.w = bsm.decode();
        }
    }
    let (_, test) = load_data(cfg)?;
    check_dataset(&net, &test)?;
    metrics(&net, &w, &test, started)
}

/// Writes `layer<l>.tvbs` per layer. Masks come from `masks_dir`
/// (`layer<l>.pgm`) when given, else from the nonzero pattern.
pub fn cmd_export(
    weights: &Path,
    masks_dir: Option<&Path>,
    min_side: usize,
    out_dir: &Path,
) -> Result<Vec<ExportLayer>, CliError> {
    let w = read_weights_file(weights)?.weights;
    let masks: Vec<SupportMatrix> = match masks_dir {
        Some(dir) => (0..w.layers.len())
            .map(|l| {
                let path = dir.join(format!("layer{l}.pgm"));
                let text = fs::read_to_string(&path).map_err(tvbi::Error::from)?;
                Ok(from_pgm(&text)?)
            })
            .collect::<Result<_, CliError>>()?,
        None => w.nonzero_masks(),
    };
    let mut report = Vec::with_capacity(w.layers.len());
    for (l, (layer, mask)) in w.layers.iter().zip(&masks).enumerate() {
        if mask.dims() != (layer.fan_in, layer.fan_out) {
            return Err(tvbi::Error::Format(format!("mask {l} has dims {:?}", mask.dims())).into());
        }
        let bsm = BlockSparseMatrix::encode(&layer.w, mask, min_side)?;
        let coo = CooMatrix::from_masked(&layer.w, mask)?;
        let file = out_dir.join(format!("layer{l}.tvbs"));
        write_file(&file, &bsm.to_bytes())?;
        let (cb, cc) = (bsm.storage_cost(), coo.storage_cost());
        report.push(ExportLayer {
            layer: l,
            file,
            blocks: bsm.blocks().len(),
            residual: bsm.residual().len(),
            nnz: coo.nnz(),
            coo_index_ints: cc.index_ints,
            block_index_ints: cb.index_ints,
            index_coding_gain: if cb.index_ints == 0 { 1.0 } else { index_coding_gain(&cc, &cb) },
            block_bytes: cb.bytes,
        });
    }
    Ok(report)
}

/// Benchmarks `W · X` for the matrix in `tvbs` against a seeded random
/// `X` with `cols` columns. Returns the CSV text.
pub fn cmd_bench(tvbs: &Path, cols: usize, repeats: usize, seed: u64) -> Result<String, CliError> {
    if cols == 0 {
        return Err(CliError::Config("bench needs at least one right-hand column".into()));
    }
    let bsm = BlockSparseMatrix::from_bytes(&fs::read(tvbs).map_err(tvbi::Error::from)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..bsm.dims().1 * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(bench_csv(&sparse::bench(&bsm, &x, cols, repeats)?))
}

/// Draws a support matrix from the MRF prior as a PGM image.
pub fn cmd_sample_prior(params: &MrfParams, dims: (usize, usize), seed: u64, sweeps: usize) -> Result<String, CliError> {
    Ok(to_pgm(&sample_support(params, dims, seed, sweeps)?))
}
