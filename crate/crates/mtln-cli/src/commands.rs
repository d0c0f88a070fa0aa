//! Pipeline commands. Each command is a pure function of its
//! configuration and input files: rerunning one with equal inputs
//! reproduces its output files byte for byte.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use mtln_core::data::{augment_dataset, generate_phantom, split_assignments, Sample, Split};
use mtln_core::ellipse::{fit_ellipse, EllipseParams};
use mtln_core::metrics::{threshold_probs, MeanStd, Summary};
use mtln_core::train::{infer_probs, train};

use crate::config::RunConfig;
use crate::manifest::{self, InferRow};
use crate::{checkpoint_io, dataset, pgm, CliError, Result};

/// Relative artifact paths resolve against the `--out` directory.
fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

/// Generates `count` phantom bases (falling back to `data.count`) into
/// the dataset directory, all initially assigned to the train split.
pub fn cmd_phantom(cfg: &RunConfig, out: &Path, seed: u64, count: Option<usize>) -> Result<()> {
    cfg.validate()?;
    let n = count.unwrap_or(cfg.data.count);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = generate_phantom(
            RunConfig::phantom_seed(seed, i as u64),
            cfg.data.height,
            cfg.data.width,
        )?;
        s.id = format!("p{i:04}");
        s.lineage = format!("{}/orig", s.id);
        entries.push((s, Split::Train));
    }
    let dir = resolve(out, &cfg.paths.dataset);
    dataset::save(&dir, &entries)?;
    println!("wrote {n} phantom samples to {}", dir.display());
    Ok(())
}

/// Expands every original sample into flips and surviving rotations.
/// Variants inherit their base's split, and the dataset is rewritten in
/// id order.
pub fn cmd_augment(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = resolve(out, &cfg.paths.dataset);
    let entries = dataset::load(&dir)?;
    let mut split_of: HashMap<String, Split> = HashMap::new();
    let mut bases: Vec<Sample> = Vec::new();
    for (sample, split) in entries {
        if sample.transform_tag() == "orig" {
            split_of.insert(sample.base_id().to_owned(), split);
            bases.push(sample);
        }
    }
    let variants = augment_dataset(&bases);
    let mut out_entries = Vec::with_capacity(variants.len());
    for v in variants {
        let split = *split_of.get(v.base_id()).ok_or_else(|| {
            CliError::Format(format!("variant {} has no base sample", v.id))
        })?;
        out_entries.push((v, split));
    }
    out_entries.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let (n_bases, n_variants) = (bases.len(), out_entries.len());
    dataset::save(&dir, &out_entries)?;
    println!("augmented {n_bases} bases into {n_variants} samples");
    Ok(())
}

/// Reassigns splits by base image, so no base's variants straddle a
/// split boundary. Only the manifest changes.
pub fn cmd_split(cfg: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    let dir = resolve(out, &cfg.paths.dataset);
    let path = dataset::manifest_path(&dir);
    let mut rows = manifest::read_manifest(&path)?;
    let mut base_ids: Vec<String> = Vec::new();
    for row in &rows {
        let base = row.lineage.split('/').next().unwrap_or(&row.lineage);
        if !base_ids.iter().any(|b| b == base) {
            base_ids.push(base.to_owned());
        }
    }
    let assignment: HashMap<String, Split> =
        split_assignments(&base_ids, RunConfig::split_seed(seed))?
            .into_iter()
            .collect();
    let mut counts = [0usize; 3];
    for row in &mut rows {
        let base = row.lineage.split('/').next().unwrap_or(&row.lineage);
        row.split = assignment[base];
        counts[row.split as usize] += 1;
    }
    manifest::write_manifest(&path, &rows)?;
    println!(
        "split {} bases: {} train / {} val / {} test samples",
        base_ids.len(),
        counts[Split::Train as usize],
        counts[Split::Val as usize],
        counts[Split::Test as usize]
    );
    Ok(())
}

/// Trains on the train split, selects by validation loss, and writes the
/// checkpoint and per-epoch loss log.
pub fn cmd_train(cfg: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    let dir = resolve(out, &cfg.paths.dataset);
    let entries = dataset::load(&dir)?;
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for (sample, split) in entries {
        match split {
            Split::Train => train_set.push(sample),
            Split::Val => val_set.push(sample),
            Split::Test => {}
        }
    }
    let tc = cfg.train_config(seed);
    let output = train(&tc, &train_set, &val_set)?;
    let ckpt_path = resolve(out, &cfg.paths.checkpoint);
    checkpoint_io::save(&ckpt_path, &output.checkpoint)?;
    manifest::write_loss_log(&resolve(out, &cfg.paths.loss_log), &output.log)?;
    println!(
        "trained {} epochs on {} samples; kept epoch {} at {}",
        tc.epochs,
        train_set.len(),
        output.checkpoint.epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn print_summary(summary: &Summary) {
    let line = |name: &str, m: &MeanStd| println!("{name}: {:.4} \u{b1} {:.4}", m.mean, m.std);
    println!("cases: {} ({} failed)", summary.cases, summary.failed);
    line("dsc", &summary.dsc);
    line("df_mm", &summary.df_mm);
    line("adf_mm", &summary.adf_mm);
    line("hd_px", &summary.hd_px);
    line("hd_mm", &summary.hd_mm);
}

/// Evaluates the checkpoint on one split and writes the metrics report.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, split: Split) -> Result<()> {
    let dir = resolve(out, &cfg.paths.dataset);
    let samples: Vec<Sample> = dataset::load(&dir)?
        .into_iter()
        .filter(|(_, s)| *s == split)
        .map(|(sample, _)| sample)
        .collect();
    let ckpt = checkpoint_io::load(&resolve(out, &cfg.paths.checkpoint))?;
    let (reports, summary) =
        mtln_core::train::evaluate_model(&ckpt, &samples, cfg.data.hd_mode.into())?;
    manifest::write_metrics(&resolve(out, &cfg.paths.metrics), &reports)?;
    println!("split: {}", split.as_str());
    print_summary(&summary);
    Ok(())
}

/// Runs the checkpoint over every `.pgm` image in a directory, writing a
/// predicted mask per image plus `predictions.csv`. The ellipse row comes
/// from fitting the predicted mask; when that fails on a multi-task
/// checkpoint, the regression head's output stands in.
pub fn cmd_infer(cfg: &RunConfig, out: &Path, images: &Path) -> Result<()> {
    cfg.validate()?;
    let ckpt = checkpoint_io::load(&resolve(out, &cfg.paths.checkpoint))?;
    let pred_dir = resolve(out, &cfg.paths.predictions_dir);
    fs::create_dir_all(&pred_dir).map_err(CliError::io(&pred_dir))?;

    let mut names: Vec<String> = fs::read_dir(images)
        .map_err(CliError::io(images))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            name.ends_with(".pgm").then_some(name)
        })
        .collect();
    names.sort();

    let mut rows = Vec::with_capacity(names.len());
    for name in &names {
        let img = pgm::read(&images.join(name))?;
        let (probs, et) = infer_probs(&ckpt, &img.to_f32(), img.h, img.w)?;
        let mask = threshold_probs(&probs, img.h, img.w);
        pgm::write_mask(&pred_dir.join(name), &mask)?;
        let ellipse = fit_ellipse(&mask)
            .ok()
            .or_else(|| et.map(|v| EllipseParams::from_normalized(v, img.w, img.h)));
        let hc_mm = ellipse.and_then(|e| e.circumference_mm(cfg.data.pixel_size_mm).ok());
        rows.push(InferRow {
            filename: name.clone(),
            ellipse,
            hc_mm,
        });
    }
    manifest::write_infer(&pred_dir.join("predictions.csv"), &rows)?;
    println!("wrote {} predictions to {}", rows.len(), pred_dir.display());
    Ok(())
}
