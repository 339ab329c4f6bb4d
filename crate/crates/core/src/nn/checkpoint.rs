//! Parameter checkpoints: a flat little-endian `f32` binary plus a text
//! index with one `name shape offset` line per array.
//!
//! ```text
//! conv0.weight 5x5x3x64 0
//! bn0.gamma 64 4800
//! ```
//!
//! Offsets count `f32` elements from the start of the binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::model::Network;
use crate::error::{Error, Result};
use crate::real::Real;

/// `(binary, index)` paths for a checkpoint stem.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("txt"))
}

fn arrays<T: Real>(net: &mut Network<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let names = net.param_names();
    let mut out: Vec<_> = names
        .into_iter()
        .zip(net.params())
        .map(|((name, shape), p)| (name, shape, p.value.iter().map(|v| v.to_f64_lossy() as f32).collect()))
        .collect();
    for (name, buf) in net.buffers() {
        let len = buf.len();
        out.push((name, vec![len], buf.iter().map(|v| v.to_f64_lossy() as f32).collect()));
    }
    out
}

/// Writes parameters and batch-norm running statistics.
pub fn save<T: Real>(net: &mut Network<T>, stem: &Path) -> Result<()> {
    let (bin, txt) = checkpoint_paths(stem);
    let mut bytes = Vec::new();
    let mut index = String::new();
    let mut offset = 0;
    for (name, shape, values) in arrays(net) {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        writeln!(index, "{name} {} {offset}", dims.join("x")).expect("string write");
        offset += values.len();
        for v in values {
            bytes.extend(v.to_le_bytes());
        }
    }
    fs::write(&bin, bytes)?;
    fs::write(&txt, index)?;
    Ok(())
}

/// Restores a checkpoint written by [`save`] for the same architecture.
pub fn load<T: Real>(net: &mut Network<T>, stem: &Path) -> Result<()> {
    let (bin, txt) = checkpoint_paths(stem);
    let bad = |message: String| Error::Data { path: txt.clone(), message };
    let bytes = fs::read(&bin)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data { path: bin.clone(), message: format!("length {} is not a multiple of 4", bytes.len()) });
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let index = fs::read_to_string(&txt)?;
    let entries: Vec<(&str, &str, usize)> = index
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            match f[..] {
                [name, shape, off] => off
                    .parse()
                    .map(|o| (name, shape, o))
                    .map_err(|_| bad(format!("bad offset in `{l}`"))),
                _ => Err(bad(format!("malformed line `{l}`"))),
            }
        })
        .collect::<Result<_>>()?;

    let expected = arrays(net);
    if entries.len() != expected.len() {
        return Err(bad(format!("{} arrays, network has {}", entries.len(), expected.len())));
    }
    let mut restored = Vec::with_capacity(entries.len());
    for ((name, shape, off), (want_name, want_shape, values)) in entries.iter().zip(&expected) {
        let dims: Vec<String> = want_shape.iter().map(|d| d.to_string()).collect();
        if *name != want_name || *shape != dims.join("x") {
            return Err(bad(format!("found {name} {shape}, expected {want_name} {}", dims.join("x"))));
        }
        let slice = floats
            .get(*off..off + values.len())
            .ok_or_else(|| bad(format!("{name} runs past the end of the binary")))?;
        restored.push(slice.to_vec());
    }
    let n_params = net.param_names().len();
    let (p_vals, b_vals) = restored.split_at(n_params);
    for (p, vals) in net.params().into_iter().zip(p_vals) {
        for (d, &v) in p.value.iter_mut().zip(vals) {
            *d = T::from_f64_lossy(v as f64);
        }
    }
    for ((_, buf), vals) in net.buffers().into_iter().zip(b_vals) {
        for (d, &v) in buf.iter_mut().zip(vals) {
            *d = T::from_f64_lossy(v as f64);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{build_model, ModelName};

    #[test]
    fn roundtrip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let mut a = build_model::<f32>(ModelName::Resnet14, (3, 8, 8), 10, 1).unwrap();
        for (_, buf) in a.buffers() {
            buf.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.5);
        }
        save(&mut a, &stem).unwrap();
        let mut b = build_model::<f32>(ModelName::Resnet14, (3, 8, 8), 10, 2).unwrap();
        load(&mut b, &stem).unwrap();
        let flat = |n: &mut Network<f32>| arrays(n).into_iter().flat_map(|a| a.2).collect::<Vec<_>>();
        assert_eq!(flat(&mut a), flat(&mut b));

        let index = fs::read_to_string(stem.with_extension("txt")).unwrap();
        let first = index.lines().next().unwrap();
        assert_eq!(first, "conv0.weight 3x3x3x16 0");
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let mut a = build_model::<f32>(ModelName::Resnet14, (3, 8, 8), 10, 1).unwrap();
        save(&mut a, &stem).unwrap();
        let mut b = build_model::<f32>(ModelName::Resnet20, (3, 8, 8), 10, 1).unwrap();
        assert!(load(&mut b, &stem).is_err());
    }
}
