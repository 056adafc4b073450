//! The repaired network: base network plus patch modules, routed by repair
//! regions and a cached allocation heuristic.
//!
//! Inputs inside any repair region get the sum of every patch whose region
//! contains them (the indicator branch).  Inputs outside all regions are
//! allocated heuristically: every patch whose anchor shares the base
//! network's prediction at the query contributes, and the decision is cached
//! for the whole ball around the query so later queries in it skip
//! re-allocation.  Cached decisions deliberately take precedence over fresh
//! computation; the indicator branch takes precedence over everything.

use crate::deeppoly::BoxRegion;
use crate::error::{Error, Result};
use crate::formats;
use crate::loss::{PatchModule, PatchSpace};
use crate::net::{Dnn, Network, SplitNetwork};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CACHE_LIMIT: usize = 100_000;

/// One repair region: the input box, its anchor point, the class the repair
/// enforces there, and the patch responsible for it.
#[derive(Debug, Clone)]
pub struct RegionEntry {
    pub region: BoxRegion,
    pub anchor: Vec<f64>,
    pub label: usize,
    pub patch_index: usize,
}

#[derive(Debug)]
struct AllocationCache {
    entries: VecDeque<(BoxRegion, Vec<usize>)>,
    limit: usize,
}

/// Base network with patch modules attached.
#[derive(Debug)]
pub struct RepairedDnn {
    base: Dnn,
    space: PatchSpace,
    patches: Vec<PatchModule>,
    regions: Vec<RegionEntry>,
    radius: f64,
    /// Base prediction at each anchor, fixed at construction; allocation
    /// matches against these.
    anchor_classes: Vec<usize>,
    split: Option<SplitNetwork>,
    cache: Mutex<AllocationCache>,
    cache_enabled: bool,
    allocations: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl RepairedDnn {
    pub fn new(
        base: Dnn,
        space: PatchSpace,
        patches: Vec<PatchModule>,
        regions: Vec<RegionEntry>,
        radius: f64,
    ) -> Result<RepairedDnn> {
        if patches.len() != regions.len() {
            return Err(Error::InvalidConfig(format!(
                "{} patches for {} regions",
                patches.len(),
                regions.len()
            )));
        }
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "allocation radius must be finite and non-negative, got {radius}"
            )));
        }
        let split = match space {
            PatchSpace::Input => None,
            PatchSpace::Feature { boundary } => Some(base.split(boundary)?),
        };
        let patch_input_dim = match &split {
            None => base.input_dim(),
            Some(s) => s.feature_dim(),
        };
        for (i, patch) in patches.iter().enumerate() {
            if patch.input_dim() != patch_input_dim {
                return Err(Error::DimensionMismatch {
                    context: format!("patch {i} input"),
                    expected: patch_input_dim,
                    actual: patch.input_dim(),
                });
            }
            if patch.output_dim() != base.output_dim() {
                return Err(Error::DimensionMismatch {
                    context: format!("patch {i} output"),
                    expected: base.output_dim(),
                    actual: patch.output_dim(),
                });
            }
        }
        let mut anchor_classes = Vec::with_capacity(regions.len());
        for (i, entry) in regions.iter().enumerate() {
            if entry.patch_index != i {
                return Err(Error::InvalidConfig(format!(
                    "region {i} points at patch {}, expected construction order",
                    entry.patch_index
                )));
            }
            if entry.region.dim() != base.input_dim() || entry.anchor.len() != base.input_dim() {
                return Err(Error::DimensionMismatch {
                    context: format!("region {i}"),
                    expected: base.input_dim(),
                    actual: entry.region.dim(),
                });
            }
            if entry.label >= base.output_dim() {
                return Err(Error::ClassOutOfRange {
                    class: entry.label,
                    num_classes: base.output_dim(),
                });
            }
            anchor_classes.push(base.classify(&entry.anchor)?);
        }
        Ok(RepairedDnn {
            base,
            space,
            patches,
            regions,
            radius,
            anchor_classes,
            split,
            cache: Mutex::new(AllocationCache {
                entries: VecDeque::new(),
                limit: DEFAULT_CACHE_LIMIT,
            }),
            cache_enabled: true,
            allocations: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        })
    }

    pub fn base(&self) -> &Dnn {
        &self.base
    }

    pub fn space(&self) -> PatchSpace {
        self.space
    }

    pub fn patches(&self) -> &[PatchModule] {
        &self.patches
    }

    pub fn regions(&self) -> &[RegionEntry] {
        &self.regions
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Base predictions at the anchors, as frozen at construction.
    pub fn anchor_classes(&self) -> &[usize] {
        &self.anchor_classes
    }

    /// Enables or disables allocation caching.  Disabled, every outside
    /// query recomputes its allocation and nothing is registered, which
    /// makes evaluation a pure function of the input.
    pub fn set_cache_enabled(&mut self, enabled: bool) {
        self.cache_enabled = enabled;
    }

    pub fn cache_enabled(&self) -> bool {
        self.cache_enabled
    }

    pub fn set_cache_limit(&mut self, limit: usize) {
        let mut cache = self.cache.lock().unwrap();
        cache.limit = limit.max(1);
        while cache.entries.len() > cache.limit {
            cache.entries.pop_front();
        }
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().entries.len()
    }

    pub fn clear_cache(&self) {
        self.cache.lock().unwrap().entries.clear();
    }

    /// Number of from-scratch allocations performed so far.
    pub fn allocations_made(&self) -> usize {
        self.allocations.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::Relaxed)
    }

    /// Bit-vector over repair regions: bit `j` set iff `x` lies in region
    /// `j` (boxes are closed, faces included).
    pub fn indicator(&self, x: &[f64]) -> Result<Vec<bool>> {
        if x.len() != self.base.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "indicator input".into(),
                expected: self.base.input_dim(),
                actual: x.len(),
            });
        }
        Ok(self.regions.iter().map(|e| e.region.contains(x)).collect())
    }

    /// Patch set for a point outside all repair regions: cached decision if
    /// one covers `x`, otherwise the patches whose anchors share the base
    /// prediction at `x`, registered for the whole ball `B(x, radius)`.
    pub fn allocate(&self, x: &[f64]) -> Result<Vec<usize>> {
        if self.cache_enabled {
            let cache = self.cache.lock().unwrap();
            for (region, set) in &cache.entries {
                if region.contains(x) {
                    self.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(set.clone());
                }
            }
        }
        let class = self.base.classify(x)?;
        let set: Vec<usize> = self
            .anchor_classes
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == class).then_some(i))
            .collect();
        self.allocations.fetch_add(1, Ordering::Relaxed);
        if self.cache_enabled {
            let ball = BoxRegion::from_center_radius(x, self.radius)?;
            let mut cache = self.cache.lock().unwrap();
            cache.entries.push_back((ball, set.clone()));
            while cache.entries.len() > cache.limit {
                cache.entries.pop_front();
            }
        }
        Ok(set)
    }

    /// Active patch indices for `x`: the indicator branch when any region
    /// contains it, else the allocation branch.
    fn active_set(&self, x: &[f64]) -> Result<Vec<usize>> {
        let bits = self.indicator(x)?;
        if bits.iter().any(|&b| b) {
            Ok(bits
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect())
        } else {
            self.allocate(x)
        }
    }

    fn patch_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.split {
            None => Ok(x.to_vec()),
            Some(split) => split.prefix().forward(x),
        }
    }

    /// Full repaired forward pass: base output plus the sum of every active
    /// patch applied to `x` (input mode) or to the split-layer activation
    /// (feature mode).
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.base.forward(x)?;
        let active = self.active_set(x)?;
        if active.is_empty() {
            return Ok(out);
        }
        let patch_in = self.patch_input(x)?;
        for &j in &active {
            let p = self.patches[j].forward(&patch_in)?;
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Saves the bundle directory: manifest, base network, one file per
    /// patch, the regions file, and (optionally) the allocation cache.
    pub fn save_bundle(&self, dir: impl AsRef<Path>, include_cache: bool) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating bundle directory {}", dir.display()), e))?;
        let manifest = ManifestFile {
            format_version: BUNDLE_FORMAT_VERSION,
            mode: match self.space {
                PatchSpace::Input => "input".into(),
                PatchSpace::Feature { .. } => "feature".into(),
            },
            split_layer: match self.space {
                PatchSpace::Input => None,
                PatchSpace::Feature { boundary } => Some(boundary),
            },
            radius: self.radius,
            patches: self.patches.len(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        formats::write_network(dir.join("base.json"), &self.base)?;
        for (i, patch) in self.patches.iter().enumerate() {
            formats::write_network(dir.join(patch_file_name(i)), patch.net())?;
        }
        let regions: Vec<RegionFile> = self
            .regions
            .iter()
            .map(|e| RegionFile {
                anchor: e.anchor.clone(),
                label: e.label,
                lower: e.region.lower().to_vec(),
                upper: e.region.upper().to_vec(),
            })
            .collect();
        write_json(&dir.join("regions.json"), &regions)?;
        if include_cache {
            let cache = self.cache.lock().unwrap();
            let entries: Vec<CacheFile> = cache
                .entries
                .iter()
                .map(|(region, set)| CacheFile {
                    lower: region.lower().to_vec(),
                    upper: region.upper().to_vec(),
                    patches: set.clone(),
                })
                .collect();
            write_json(&dir.join("cache.json"), &entries)?;
        }
        Ok(())
    }

    /// Loads a bundle directory written by [`save_bundle`].  A cache file is
    /// honored when present; its absence just starts with an empty cache.
    pub fn load_bundle(dir: impl AsRef<Path>) -> Result<RepairedDnn> {
        let dir = dir.as_ref();
        let manifest: ManifestFile = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: manifest.format_version.to_string(),
                supported: BUNDLE_FORMAT_VERSION.to_string(),
            });
        }
        let space = match (manifest.mode.as_str(), manifest.split_layer) {
            ("input", _) => PatchSpace::Input,
            ("feature", Some(boundary)) => PatchSpace::Feature { boundary },
            ("feature", None) => {
                return Err(Error::Parse {
                    path: dir.join("manifest.json").display().to_string(),
                    location: "split_layer".into(),
                    message: "feature mode requires a split layer".into(),
                })
            }
            (other, _) => {
                return Err(Error::Parse {
                    path: dir.join("manifest.json").display().to_string(),
                    location: "mode".into(),
                    message: format!("unknown mode {other:?}"),
                })
            }
        };
        let base = formats::read_network(dir.join("base.json"))?;
        let mut patches = Vec::with_capacity(manifest.patches);
        for i in 0..manifest.patches {
            let path = dir.join(patch_file_name(i));
            if !path.exists() {
                return Err(Error::MissingBundleFile {
                    index: i,
                    file: patch_file_name(i),
                });
            }
            patches.push(PatchModule::new(formats::read_network(&path)?, space));
        }
        let region_files: Vec<RegionFile> = read_json(&dir.join("regions.json"))?;
        let regions = region_files
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(RegionEntry {
                    region: BoxRegion::new(Array1::from_vec(r.lower), Array1::from_vec(r.upper))?,
                    anchor: r.anchor,
                    label: r.label,
                    patch_index: i,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let repaired = RepairedDnn::new(base, space, patches, regions, manifest.radius)?;
        let cache_path = dir.join("cache.json");
        if cache_path.exists() {
            let entries: Vec<CacheFile> = read_json(&cache_path)?;
            let mut cache = repaired.cache.lock().unwrap();
            for e in entries {
                cache.entries.push_back((
                    BoxRegion::new(Array1::from_vec(e.lower), Array1::from_vec(e.upper))?,
                    e.patches,
                ));
            }
        }
        Ok(repaired)
    }
}

impl Network for RepairedDnn {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.base.output_dim()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.evaluate(x)
    }

    fn input_gradient(&self, x: &[f64], objective: &[f64]) -> Result<Vec<f64>> {
        let mut grad = self.base.vjp(x, objective)?;
        let active = self.active_set(x)?;
        if !active.is_empty() {
            match &self.split {
                None => {
                    for &j in &active {
                        grad += &self.patches[j].net().vjp(x, objective)?;
                    }
                }
                Some(split) => {
                    let features = split.prefix().forward(x)?;
                    for &j in &active {
                        let feature_cot = self.patches[j].net().vjp(&features, objective)?;
                        grad += &split
                            .prefix()
                            .vjp(x, feature_cot.as_slice().unwrap())?;
                    }
                }
            }
        }
        Ok(grad.to_vec())
    }
}

fn patch_file_name(i: usize) -> String {
    format!("patch_{i:03}.json")
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split_layer: Option<usize>,
    radius: f64,
    patches: usize,
}

#[derive(Serialize, Deserialize)]
struct RegionFile {
    anchor: Vec<f64>,
    label: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    lower: Vec<f64>,
    upper: Vec<f64>,
    patches: Vec<usize>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}
