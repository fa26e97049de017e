//! Checkpoint directories: `manifest.txt` (tensor name, shape, byte offset,
//! SHA-256), `payload.bin` (little-endian f64) and `config.toml`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const FORMAT: &str = "maskcluster-checkpoint 1";
const MANIFEST: &str = "manifest.txt";
const PAYLOAD: &str = "payload.bin";
const CONFIG: &str = "config.toml";

/// Standard checkpoint directory name for `step`.
pub fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{step:07}"))
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Every stored tensor in manifest order: student, teacher, then the first
/// and second optimiser moments of the student.
fn entries(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (group, store) in [("student", &state.student), ("teacher", &state.teacher)] {
        for (name, t) in store.iter() {
            out.push((format!("{group}/{name}"), t));
        }
    }
    for (group, moments) in [("adam_m", &state.opt.m), ("adam_v", &state.opt.v)] {
        for (name, t) in state.student.names().iter().zip(moments) {
            out.push((format!("{group}/{name}"), t));
        }
    }
    out
}

fn bytes_of(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn hex(d: &[u8]) -> String {
    d.iter().fold(String::with_capacity(d.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn save(state: &TrainState, cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "format {FORMAT}\nstep {}\nseed {}\nadam_t {}\n",
        state.step, state.seed, state.opt.t
    );
    let mut payload = Vec::new();
    for (name, t) in entries(state) {
        let bytes = bytes_of(t);
        let _ = writeln!(
            manifest,
            "tensor {name} {} {} {}",
            shape_str(t.shape()),
            payload.len(),
            hex(&Sha256::digest(&bytes))
        );
        payload.extend(bytes);
    }
    let write = |name: &str, data: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, data).map_err(|e| Error::io(p, e))
    };
    write(PAYLOAD, &payload)?;
    write(CONFIG, cfg.to_toml()?.as_bytes())?;
    write(MANIFEST, manifest.as_bytes())
}

struct Entry {
    name: String,
    shape: String,
    offset: usize,
    checksum: String,
}

struct Manifest {
    step: u64,
    seed: u64,
    adam_t: u64,
    tensors: Vec<Entry>,
}

fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let bad = |line: &str| Error::Manifest(format!("{}: unreadable line `{line}`", path.display()));
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == format!("format {FORMAT}") => {}
        other => {
            return Err(Error::Manifest(format!(
                "- format {FORMAT}\n+ {}",
                other.unwrap_or("<empty>")
            )))
        }
    }
    let mut m = Manifest {
        step: 0,
        seed: 0,
        adam_t: 0,
        tensors: Vec::new(),
    };
    for line in lines {
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["step", v] => m.step = v.parse().map_err(|_| bad(line))?,
            ["seed", v] => m.seed = v.parse().map_err(|_| bad(line))?,
            ["adam_t", v] => m.adam_t = v.parse().map_err(|_| bad(line))?,
            ["tensor", name, shape, offset, sum] => m.tensors.push(Entry {
                name: name.to_string(),
                shape: shape.to_string(),
                offset: offset.parse().map_err(|_| bad(line))?,
                checksum: sum.to_string(),
            }),
            [""] => {}
            _ => return Err(bad(line)),
        }
    }
    Ok(m)
}

/// Loads a checkpoint written by [`save`]. The stored configuration fixes
/// the expected tensor layout; any difference is refused with a line diff.
pub fn load(dir: &Path) -> Result<(TrainState, RunConfig)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let cfg_text = String::from_utf8(read(CONFIG)?).map_err(|_| Error::Config("config.toml is not UTF-8".into()))?;
    let cfg = RunConfig::from_toml_str(&cfg_text)?;
    let manifest_path = dir.join(MANIFEST);
    let text = String::from_utf8(read(MANIFEST)?).map_err(|_| Error::Manifest("manifest is not UTF-8".into()))?;
    let m = parse_manifest(&text, &manifest_path)?;
    let payload = read(PAYLOAD)?;

    let mut state = TrainState::new(&cfg)?;
    let expected: Vec<(String, String)> = entries(&state)
        .into_iter()
        .map(|(n, t)| (n, shape_str(t.shape())))
        .collect();
    let found: Vec<(String, String)> = m.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if expected != found {
        let mut diff = String::new();
        for e in &expected {
            if !found.contains(e) {
                let _ = writeln!(diff, "- {} {}", e.0, e.1);
            }
        }
        for f in &found {
            if !expected.contains(f) {
                let _ = writeln!(diff, "+ {} {}", f.0, f.1);
            }
        }
        if diff.is_empty() {
            diff.push_str("tensor order differs\n");
        }
        return Err(Error::Manifest(diff));
    }

    let mut tensors = Vec::with_capacity(m.tensors.len());
    for (e, (_, t)) in m.tensors.iter().zip(entries(&state)) {
        let len = t.numel() * 8;
        let bytes = payload.get(e.offset..e.offset + len).ok_or_else(|| Error::Checksum {
            name: e.name.clone(),
            path: dir.join(PAYLOAD),
        })?;
        if hex(&Sha256::digest(bytes)) != e.checksum {
            return Err(Error::Checksum {
                name: e.name.clone(),
                path: dir.join(PAYLOAD),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor::new(t.shape().to_vec(), data)?);
    }
    let mut it = tensors.into_iter();
    let fill = |store: &mut ParamStore, it: &mut dyn Iterator<Item = Tensor>| {
        for t in store.tensors_mut() {
            *t = it.next().expect("entry count checked");
        }
    };
    fill(&mut state.student, &mut it);
    fill(&mut state.teacher, &mut it);
    let n = state.student.len();
    let m_moments: Vec<Tensor> = it.by_ref().take(n).collect();
    let v_moments: Vec<Tensor> = it.by_ref().take(n).collect();
    state.opt = AdamW {
        m: m_moments,
        v: v_moments,
        t: m.adam_t,
    };
    state.step = m.step;
    state.seed = m.seed;
    Ok((state, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_manifest_contents() {
        let cfg = RunConfig::tiny();
        let mut state = TrainState::new(&cfg).unwrap();
        state.step = 5;
        state.opt.t = 5;
        state.opt.m[0].data_mut()[0] = 0.125;
        let dir = tempfile::tempdir().unwrap();
        save(&state, &cfg, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        for (name, t) in state.student.iter() {
            assert!(text.contains(&format!("tensor student/{name} {} ", shape_str(t.shape()))));
            assert!(text.contains(&format!("tensor teacher/{name} ")));
        }
        let (back, cfg2) = load(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.student, state.student);
        assert_eq!(back.teacher, state.teacher);
        assert_eq!(back.opt, state.opt);
        assert_eq!(back.step, 5);
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let cfg = RunConfig::tiny();
        let state = TrainState::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&state, &cfg, dir.path()).unwrap();
        let p = dir.path().join(PAYLOAD);
        let mut bytes = fs::read(&p).unwrap();
        bytes[100] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn shape_mismatch_is_refused_with_a_diff() {
        let cfg = RunConfig::tiny();
        let state = TrainState::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&state, &cfg, dir.path()).unwrap();
        let mut other = cfg.clone();
        other.model.cluster.clusters = 16;
        fs::write(dir.path().join(CONFIG), other.to_toml().unwrap()).unwrap();
        match load(dir.path()) {
            Err(Error::Manifest(d)) => {
                assert!(d.contains("- student/class_cluster.weight 32x16"), "{d}");
                assert!(d.contains("+ student/class_cluster.weight 32x64"), "{d}");
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn wrong_version_is_refused() {
        let cfg = RunConfig::tiny();
        let state = TrainState::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&state, &cfg, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replace("checkpoint 1", "checkpoint 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Manifest(_))));
    }
}
