//! Dataset directory layout and ingestion. A dataset lives in one
//! directory: `images/{id}.pgm`, `masks/{id}.pgm`, and `manifest.csv`
//! describing every sample. External data arrives as raw PGM images plus
//! an annotation CSV and is converted into the same layout.

use std::fs;
use std::path::{Path, PathBuf};

use mtln_core::data::{Provenance, Sample, Split};
use mtln_core::ellipse::rasterize_ellipse;

use crate::manifest::{self, ManifestRow};
use crate::{pgm, CliError, Result};

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.csv")
}

pub fn image_path(dir: &Path, filename: &str) -> PathBuf {
    dir.join("images").join(filename)
}

pub fn mask_path(dir: &Path, filename: &str) -> PathBuf {
    dir.join("masks").join(filename)
}

fn row_for(sample: &Sample, split: Split) -> ManifestRow {
    ManifestRow {
        id: sample.id.clone(),
        filename: format!("{}.pgm", sample.id),
        split,
        pixel_size_mm: sample.pixel_size_mm,
        ellipse: sample.ellipse,
        lineage: sample.lineage.clone(),
    }
}

/// Writes a complete dataset directory. Existing `images/` and `masks/`
/// subdirectories are replaced so a rerun never leaves stale files.
pub fn save(dir: &Path, entries: &[(Sample, Split)]) -> Result<()> {
    for sub in ["images", "masks"] {
        let sub = dir.join(sub);
        match fs::remove_dir_all(&sub) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(CliError::io(&sub)(e)),
        }
        fs::create_dir_all(&sub).map_err(CliError::io(&sub))?;
    }
    let mut rows = Vec::with_capacity(entries.len());
    for (sample, split) in entries {
        let row = row_for(sample, *split);
        pgm::write_image(
            &image_path(dir, &row.filename),
            &sample.image,
            sample.h,
            sample.w,
        )?;
        pgm::write_mask(&mask_path(dir, &row.filename), &sample.mask)?;
        rows.push(row);
    }
    manifest::write_manifest(&manifest_path(dir), &rows)
}

/// Reads a dataset directory back. Loaded samples carry external
/// provenance: after the 8-bit image round-trip they are no longer
/// bitwise phantom outputs, so they get the resampled-variant checks.
pub fn load(dir: &Path) -> Result<Vec<(Sample, Split)>> {
    let rows = manifest::read_manifest(&manifest_path(dir))?;
    let mut entries = Vec::with_capacity(rows.len());
    for row in rows {
        let img = pgm::read(&image_path(dir, &row.filename))?;
        let mask = pgm::read(&mask_path(dir, &row.filename))?.to_mask()?;
        if (mask.height(), mask.width()) != (img.h, img.w) {
            return Err(CliError::Format(format!(
                "{}: mask is {}x{}, image is {}x{}",
                row.filename,
                mask.height(),
                mask.width(),
                img.h,
                img.w
            )));
        }
        let sample = Sample {
            id: row.id,
            image: img.to_f32(),
            h: img.h,
            w: img.w,
            mask,
            ellipse: row.ellipse,
            pixel_size_mm: row.pixel_size_mm,
            provenance: Provenance::External,
            lineage: row.lineage,
        };
        sample.validate()?;
        entries.push((sample, row.split));
    }
    Ok(entries)
}

/// Converts raw annotated images into samples: the mask is rasterized
/// from the annotation ellipse. Every image must share one frame size;
/// out-of-range orientation angles are canonicalized with a warning.
pub fn load_external(csv_path: &Path, image_dir: &Path) -> Result<Vec<Sample>> {
    let rows = manifest::read_external(csv_path)?;
    let mut samples: Vec<Sample> = Vec::with_capacity(rows.len());
    for row in rows {
        let path = image_dir.join(&row.filename);
        let img = pgm::read(&path)?;
        if let Some(first) = samples.first() {
            if (img.h, img.w) != (first.h, first.w) {
                return Err(CliError::Format(format!(
                    "{}: image is {}x{}, dataset frame is {}x{}",
                    row.filename, img.h, img.w, first.h, first.w
                )));
            }
        }
        if !(0.01..=1.0).contains(&row.pixel_size_mm) {
            return Err(CliError::Format(format!(
                "{}: pixel_size_mm {} outside [0.01, 1.0]",
                row.filename, row.pixel_size_mm
            )));
        }
        let canonical = row.ellipse.canonical();
        if canonical != row.ellipse {
            eprintln!(
                "warning: {}: ellipse not in canonical form (a >= b, theta in [0, pi)); adjusted",
                row.filename
            );
        }
        let mask = rasterize_ellipse(&canonical, img.h, img.w)?;
        let id = row
            .filename
            .strip_suffix(".pgm")
            .unwrap_or(&row.filename)
            .to_owned();
        let sample = Sample {
            lineage: format!("{id}/orig"),
            id,
            image: img.to_f32(),
            h: img.h,
            w: img.w,
            mask,
            ellipse: canonical,
            pixel_size_mm: row.pixel_size_mm,
            provenance: Provenance::External,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mtln_core::data::generate_phantom;

    #[test]
    fn save_and_load_round_trip_a_phantom_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<(Sample, Split)> = (0..3)
            .map(|i| {
                let mut s = generate_phantom(40 + i, 64, 64).unwrap();
                s.id = format!("p{i:04}");
                s.lineage = format!("{}/orig", s.id);
                (s, Split::Train)
            })
            .collect();
        save(dir.path(), &entries).unwrap();

        let back = load(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for ((orig, _), (loaded, split)) in entries.iter().zip(&back) {
            assert_eq!(*split, Split::Train);
            assert_eq!(loaded.id, orig.id);
            assert_eq!(loaded.mask, orig.mask);
            assert_eq!(loaded.ellipse, orig.ellipse);
            assert_eq!(loaded.pixel_size_mm, orig.pixel_size_mm);
            assert_eq!(loaded.provenance, Provenance::External);
            // Image survives up to 8-bit quantization.
            let max_err = orig
                .image
                .iter()
                .zip(&loaded.image)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-6, "max_err {max_err}");
        }
    }

    #[test]
    fn save_replaces_stale_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = generate_phantom(77, 64, 64).unwrap();
        s.id = "p0000".into();
        s.lineage = "p0000/orig".into();
        let stale = image_path(dir.path(), "ghost.pgm");
        fs::create_dir_all(stale.parent().unwrap()).unwrap();
        fs::write(&stale, b"junk").unwrap();
        save(dir.path(), &[(s, Split::Train)]).unwrap();
        assert!(!stale.exists());
        assert!(image_path(dir.path(), "p0000.pgm").exists());
    }

    #[test]
    fn external_ingestion_rasterizes_masks_and_canonicalizes() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_phantom(9, 64, 64).unwrap();
        pgm::write_image(&dir.path().join("scan1.pgm"), &s.image, 64, 64).unwrap();
        // theta = 4.0 is outside [0, pi); expect canonicalization.
        std::fs::write(
            dir.path().join("list.csv"),
            format!(
                "filename,pixel_size_mm,cx,cy,a,b,theta\nscan1.pgm,0.2,{},{},{},{},4.0\n",
                s.ellipse.cx, s.ellipse.cy, s.ellipse.a, s.ellipse.b
            ),
        )
        .unwrap();
        let samples = load_external(&dir.path().join("list.csv"), dir.path()).unwrap();
        assert_eq!(samples.len(), 1);
        let got = &samples[0];
        assert_eq!(got.id, "scan1");
        assert_eq!(got.provenance, Provenance::External);
        assert!(got.ellipse.theta >= 0.0 && got.ellipse.theta < core::f64::consts::PI);
        assert_eq!(
            got.mask,
            rasterize_ellipse(&got.ellipse, 64, 64).unwrap(),
            "mask must be the rasterized annotation"
        );
    }

    #[test]
    fn external_ingestion_rejects_bad_pixel_size_and_mixed_dims() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_phantom(10, 64, 64).unwrap();
        pgm::write_image(&dir.path().join("a.pgm"), &s.image, 64, 64).unwrap();
        let t = generate_phantom(11, 64, 96).unwrap();
        pgm::write_image(&dir.path().join("b.pgm"), &t.image, 64, 96).unwrap();

        let csv = dir.path().join("list.csv");
        std::fs::write(
            &csv,
            "filename,pixel_size_mm,cx,cy,a,b,theta\na.pgm,1.5,32,32,14,9,0.0\n",
        )
        .unwrap();
        let err = load_external(&csv, dir.path()).unwrap_err();
        assert!(err.to_string().contains("pixel_size_mm"), "{err}");

        std::fs::write(
            &csv,
            "filename,pixel_size_mm,cx,cy,a,b,theta\n\
             a.pgm,0.2,32,32,14,9,0.0\n\
             b.pgm,0.2,32,32,14,9,0.0\n",
        )
        .unwrap();
        let err = load_external(&csv, dir.path()).unwrap_err();
        assert!(err.to_string().contains("frame"), "{err}");
    }
}
