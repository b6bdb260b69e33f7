//! On-disk dataset: `root/<split>/<flight>/frame_%04d.png`, `wire_%04d.png`,
//! `depth_%04d.utf`, plus `root/manifest.json` listing flights per split
//! and a SHA-256 of every file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ucorr_core::synth::{derive_seed, generate_flight, wire_pixel_rate, Flight, Image, Sample, SampleMeta, View};

use crate::config::{DataConfig, SPLITS};
use crate::io::{atomic_write, depth_bytes, mask_png, read_depth, read_mask, read_rgb, rgb_png};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
const TAG_FLIGHT: u64 = 0xf1_1647;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightEntry {
    pub id: String,
    pub scene_seed: u64,
    pub baseline: f32,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub flights: usize,
    pub frames: usize,
    pub wire_pixel_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub splits: BTreeMap<String, Vec<FlightEntry>>,
    pub summary: Summary,
    /// Relative path to lowercase hex SHA-256.
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.format != FORMAT_VERSION {
            bail!("{}: unsupported dataset format {}", path.display(), m.format);
        }
        Ok(m)
    }

    pub fn split(&self, name: &str) -> Result<&[FlightEntry]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .with_context(|| format!("dataset has no `{name}` split"))
    }

    /// One digest over every file checksum, in path order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (path, sum) in &self.checksums {
            h.update(path.as_bytes());
            h.update(sum.as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn summary_line(&self) -> String {
        let per_split: Vec<String> = SPLITS
            .iter()
            .filter_map(|s| self.splits.get(*s).map(|f| format!("{s} {}", f.len())))
            .collect();
        format!(
            "{} flights ({}), {} frames, {}x{}, wire-pixel rate {:.3}%",
            self.summary.flights,
            per_split.join(", "),
            self.summary.frames,
            self.width,
            self.height,
            100.0 * self.summary.wire_pixel_rate
        )
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:04}.png"))
}

pub fn wire_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("wire_{i:04}.png"))
}

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("depth_{i:04}.utf"))
}

fn flight_id(k: usize) -> String {
    format!("flight_{k:04}")
}

/// Seed of the `k`-th flight, counted over all splits.
pub fn flight_seed(data_seed: u64, k: usize) -> u64 {
    derive_seed(data_seed, &[TAG_FLIGHT, k as u64])
}

/// Encoded files of one view: (file name, bytes).
fn view_files(dir: &Path, i: usize, v: &View) -> Result<[(PathBuf, Vec<u8>); 3]> {
    Ok([
        (frame_path(dir, i), rgb_png(&v.rgb)?),
        (wire_path(dir, i), mask_png(&v.wire_mask)?),
        (depth_path(dir, i), depth_bytes(&v.depth)?),
    ])
}

/// Renders every flight and writes the dataset under `root`, which must
/// already exist. Flights render in parallel; output bytes do not depend
/// on the thread count.
pub fn write_dataset(cfg: &DataConfig, root: &Path) -> Result<Manifest> {
    let mut jobs = Vec::new();
    for split in SPLITS {
        for _ in 0..cfg.flights(split) {
            jobs.push((split, jobs.len()));
        }
    }
    let written: Vec<(String, FlightEntry, Vec<(String, String)>, Vec<Image>)> = jobs
        .par_iter()
        .map(|&(split, k)| -> Result<_> {
            let flight = generate_flight(&cfg.scene, flight_seed(cfg.seed, k), cfg.frames_per_flight)?;
            let id = flight_id(k);
            let rel = Path::new(split).join(&id);
            let mut sums = Vec::new();
            for (i, view) in flight.views.iter().enumerate() {
                for (path, bytes) in view_files(&root.join(&rel), i, view)? {
                    atomic_write(&path, &bytes)?;
                    let rel_path = path.strip_prefix(root).expect("under root");
                    sums.push((rel_path.to_string_lossy().replace('\\', "/"), hex(&Sha256::digest(&bytes))));
                }
            }
            let entry = FlightEntry {
                id,
                scene_seed: flight.scene_seed,
                baseline: flight.baseline,
                frames: flight.views.len(),
            };
            let masks = flight.views.into_iter().map(|v| v.wire_mask).collect();
            Ok((split.to_string(), entry, sums, masks))
        })
        .collect::<Result<_>>()?;

    let mut splits: BTreeMap<String, Vec<FlightEntry>> = SPLITS.iter().map(|s| (s.to_string(), Vec::new())).collect();
    let mut checksums = BTreeMap::new();
    let mut masks = Vec::new();
    for (split, entry, sums, m) in written {
        splits.get_mut(&split).expect("known split").push(entry);
        checksums.extend(sums);
        masks.extend(m);
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        seed: cfg.seed,
        height: cfg.scene.height,
        width: cfg.scene.width,
        summary: Summary {
            flights: jobs.len(),
            frames: masks.len(),
            wire_pixel_rate: wire_pixel_rate(&masks),
        },
        splits,
        checksums,
    };
    atomic_write(&root.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Loads one frame with its labels, or `None` (with a warning) if any of
/// the three files is missing. Corrupt files are errors.
fn read_view(dir: &Path, i: usize) -> Result<Option<View>> {
    let paths = [frame_path(dir, i), wire_path(dir, i), depth_path(dir, i)];
    if let Some(missing) = paths.iter().find(|p| !p.exists()) {
        warn!("skipping frame {i} of {}: {} is missing", dir.display(), missing.display());
        return Ok(None);
    }
    let view = View {
        rgb: read_rgb(&paths[0])?,
        wire_mask: read_mask(&paths[1])?,
        depth: read_depth(&paths[2])?,
    };
    if !view.rgb.same_dims(&view.wire_mask) || !view.depth.same_dims(&view.wire_mask) {
        bail!("frame {i} of {}: frame, mask and depth sizes differ", dir.display());
    }
    Ok(Some(view))
}

/// Samples of `window` consecutive frames within one flight. A skipped
/// frame breaks the run, so no window spans a gap.
pub fn read_flight(root: &Path, split: &str, entry: &FlightEntry, window: usize) -> Result<Vec<Sample>> {
    let dir = root.join(split).join(&entry.id);
    let mut samples = Vec::new();
    let mut run: Vec<(usize, View)> = Vec::new();
    for i in 0..entry.frames {
        match read_view(&dir, i)? {
            Some(v) => run.push((i, v)),
            None => {
                samples.extend(run_samples(&run, entry, window));
                run.clear();
            }
        }
    }
    samples.extend(run_samples(&run, entry, window));
    Ok(samples)
}

fn run_samples(run: &[(usize, View)], entry: &FlightEntry, window: usize) -> Vec<Sample> {
    if window == 0 {
        return Vec::new();
    }
    run.windows(window)
        .map(|w| {
            let (last, view) = w.last().expect("window is non-empty");
            Sample {
                frames: w.iter().map(|(_, v)| v.rgb.clone()).collect(),
                wire_mask: view.wire_mask.clone(),
                depth: view.depth.clone(),
                meta: SampleMeta {
                    scene_seed: entry.scene_seed,
                    baseline: entry.baseline,
                    frame_index: *last,
                },
            }
        })
        .collect()
}

/// Every sample of a split, flights in manifest order.
pub fn read_split(root: &Path, split: &str, window: usize) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(root)?;
    let flights = manifest.split(split)?;
    let per_flight: Vec<Vec<Sample>> = flights
        .par_iter()
        .map(|f| read_flight(root, split, f, window))
        .collect::<Result<_>>()?;
    Ok(per_flight.into_iter().flatten().collect())
}

/// In-memory flight as it would read back from disk (frames quantized to
/// 8 bits).
pub fn quantized(flight: &Flight) -> Flight {
    let mut f = flight.clone();
    for v in &mut f.views {
        for x in &mut v.rgb.data {
            *x = (x.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::prepare_output_dir;

    fn small() -> DataConfig {
        let mut cfg = DataConfig {
            train_flights: 2,
            val_flights: 1,
            test_flights: 1,
            frames_per_flight: 3,
            ..DataConfig::default()
        };
        cfg.scene.height = 48;
        cfg.scene.width = 48;
        cfg
    }

    #[test]
    fn write_then_read_pairs_within_flights() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = write_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.summary.flights, 4);
        assert_eq!(m.summary.frames, 12);
        assert_eq!(m.checksums.len(), 36);
        let train = read_split(dir.path(), "train", 2).unwrap();
        assert_eq!(train.len(), 4);
        let flight = generate_flight(&cfg.scene, flight_seed(cfg.seed, 0), 3).unwrap();
        assert_eq!(train[..2], quantized(&flight).samples(2)[..]);
        assert!(read_split(dir.path(), "nope", 2).is_err());
    }

    #[test]
    fn missing_companion_skips_frame() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.frames_per_flight = 5;
        write_dataset(&cfg, dir.path()).unwrap();
        std::fs::remove_file(depth_path(&dir.path().join("test/flight_0003"), 2)).unwrap();
        let s = read_split(dir.path(), "test", 2).unwrap();
        let idx: Vec<usize> = s.iter().map(|s| s.meta.frame_index).collect();
        assert_eq!(idx, vec![1, 4]);
    }

    #[test]
    fn same_seed_same_fingerprint() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = small();
        let ma = write_dataset(&cfg, a.path()).unwrap();
        prepare_output_dir(b.path(), true).unwrap();
        let mb = write_dataset(&cfg, b.path()).unwrap();
        assert_eq!(ma.fingerprint(), mb.fingerprint());
        let mut other = cfg.clone();
        other.seed = 1;
        let c = tempfile::tempdir().unwrap();
        assert_ne!(write_dataset(&other, c.path()).unwrap().fingerprint(), ma.fingerprint());
    }
}
