use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, Result, WindowSet, WindowTag};
use crate::archive::Archive;

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    kind: String,
    src_channels: usize,
    dst_channels: usize,
    n_w: usize,
    labels: Vec<usize>,
    tags: Vec<WindowTag>,
}

const KIND: &str = "window-cache";

/// Stores a split as an archive with tensors `src[N, c_src, n_w]` and
/// `dst[N, c_dst, n_w]` (32-bit) and labels/tags in the manifest.
pub fn write_window_cache(path: &Path, set: &WindowSet) -> Result<()> {
    let meta = CacheMeta {
        kind: KIND.into(),
        src_channels: set.src_channels,
        dst_channels: set.dst_channels,
        n_w: set.n_w,
        labels: set.labels.clone(),
        tags: set.tags.clone(),
    };
    let mut a = Archive::new(serde_json::to_value(meta).map_err(|e| DatasetError::Contract(e.to_string()))?);
    let n = set.len();
    a.push("src", vec![n, set.src_channels, set.n_w], set.src.iter().map(|&v| v as f32).collect());
    a.push("dst", vec![n, set.dst_channels, set.n_w], set.dst.iter().map(|&v| v as f32).collect());
    a.save(path)?;
    Ok(())
}

pub fn read_window_cache(path: &Path) -> Result<WindowSet> {
    let a = Archive::load(path)?;
    let bad = |m: &str| DatasetError::Contract(format!("{}: {m}", path.display()));
    let meta: CacheMeta = serde_json::from_value(a.meta.clone()).map_err(|e| bad(&e.to_string()))?;
    if meta.kind != KIND {
        return Err(bad("not a window cache"));
    }
    let take = |name: &str, c: usize| -> Result<Vec<f64>> {
        let t = a.get(name).ok_or_else(|| bad(&format!("missing tensor {name}")))?;
        if t.shape != [meta.labels.len(), c, meta.n_w] {
            return Err(bad(&format!("tensor {name} has shape {:?}", t.shape)));
        }
        Ok(t.data.iter().map(|&v| v as f64).collect())
    };
    Ok(WindowSet {
        src: take("src", meta.src_channels)?,
        dst: take("dst", meta.dst_channels)?,
        src_channels: meta.src_channels,
        dst_channels: meta.dst_channels,
        n_w: meta.n_w,
        labels: meta.labels,
        tags: meta.tags,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{make_windows, synth_transfer_dataset};
    use super::*;

    #[test]
    fn cache_round_trip() {
        let recs = synth_transfer_dataset(1, 3, 6, 1.0);
        let names = |s: &str| vec![s.to_string()];
        let pairs = make_windows(&recs[0], &names("SRC"), &names("DST"), 2.0, 0.5).unwrap();
        let set = WindowSet::from_pairs(&pairs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        write_window_cache(&path, &set).unwrap();
        let back = read_window_cache(&path).unwrap();
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.tags, set.tags);
        for (a, b) in back.dst.iter().zip(&set.dst) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
