//! Parameter layout of the model and checkpoint files.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::{PackedParams, SegId};
use crate::tensor::{io, Tensor};

/// Gated attention: LayerNorm, stacked q/k/v/g projection, output linear.
#[derive(Clone, Copy, Debug)]
pub struct GaW {
    pub ln_g: SegId,
    pub ln_b: SegId,
    /// `[4, c, H*D]`
    pub w_qkvg: SegId,
    pub w_o: SegId,
    pub b_o: SegId,
}

/// Pair-bias projection: LayerNorm then `c_z -> H` without bias.
#[derive(Clone, Copy, Debug)]
pub struct PbW {
    pub ln_g: SegId,
    pub ln_b: SegId,
    pub w: SegId,
}

#[derive(Clone, Copy, Debug)]
pub struct TransW {
    pub ln_g: SegId,
    pub ln_b: SegId,
    pub w1: SegId,
    pub b1: SegId,
    pub w2: SegId,
    pub b2: SegId,
}

#[derive(Clone, Copy, Debug)]
pub struct OpmW {
    pub ln_g: SegId,
    pub ln_b: SegId,
    pub wa: SegId,
    pub ba: SegId,
    pub wb: SegId,
    pub bb: SegId,
    /// `[c_opm * c_opm, c_z]`
    pub wo: SegId,
    pub bo: SegId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockWeights {
    pub row: GaW,
    pub row_bias: PbW,
    pub col: GaW,
    pub msa_trans: TransW,
    pub opm: OpmW,
    pub tri_start: GaW,
    pub tri_start_bias: PbW,
    pub tri_end: GaW,
    pub tri_end_bias: PbW,
    pub pair_trans: TransW,
}

#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub blocks: Vec<BlockWeights>,
    pub rec_msa_g: SegId,
    pub rec_msa_b: SegId,
    pub rec_pair_g: SegId,
    pub rec_pair_b: SegId,
}

struct Init {
    rng: StdRng,
}

impl Init {
    fn normal(&mut self, fan_in: usize) -> impl FnMut(usize) -> f32 + '_ {
        let d = Normal::new(0.0f32, 1.0 / (fan_in as f32).sqrt()).expect("positive std");
        move |_| d.sample(&mut self.rng)
    }
}

fn ga(p: &mut PackedParams, init: &mut Init, name: &str, c: usize, hd: usize) -> Result<GaW> {
    Ok(GaW {
        ln_g: p.register(format!("{name}.ln.gamma"), &[c], |_| 1.0)?,
        ln_b: p.register(format!("{name}.ln.beta"), &[c], |_| 0.0)?,
        w_qkvg: p.register(format!("{name}.w_qkvg"), &[4, c, hd], init.normal(c))?,
        w_o: p.register(format!("{name}.w_o"), &[hd, c], init.normal(hd))?,
        b_o: p.register(format!("{name}.b_o"), &[c], |_| 0.0)?,
    })
}

fn pb(p: &mut PackedParams, init: &mut Init, name: &str, c_z: usize, h: usize) -> Result<PbW> {
    Ok(PbW {
        ln_g: p.register(format!("{name}.ln.gamma"), &[c_z], |_| 1.0)?,
        ln_b: p.register(format!("{name}.ln.beta"), &[c_z], |_| 0.0)?,
        w: p.register(format!("{name}.w"), &[c_z, h], init.normal(c_z))?,
    })
}

fn trans(p: &mut PackedParams, init: &mut Init, name: &str, c: usize, f: usize) -> Result<TransW> {
    Ok(TransW {
        ln_g: p.register(format!("{name}.ln.gamma"), &[c], |_| 1.0)?,
        ln_b: p.register(format!("{name}.ln.beta"), &[c], |_| 0.0)?,
        w1: p.register(format!("{name}.w1"), &[c, f * c], init.normal(c))?,
        b1: p.register(format!("{name}.b1"), &[f * c], |_| 0.0)?,
        w2: p.register(format!("{name}.w2"), &[f * c, c], init.normal(f * c))?,
        b2: p.register(format!("{name}.b2"), &[c], |_| 0.0)?,
    })
}

fn opm(p: &mut PackedParams, init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<OpmW> {
    let (c, co) = (cfg.c_m, cfg.c_opm);
    Ok(OpmW {
        ln_g: p.register(format!("{name}.ln.gamma"), &[c], |_| 1.0)?,
        ln_b: p.register(format!("{name}.ln.beta"), &[c], |_| 0.0)?,
        wa: p.register(format!("{name}.wa"), &[c, co], init.normal(c))?,
        ba: p.register(format!("{name}.ba"), &[co], |_| 0.0)?,
        wb: p.register(format!("{name}.wb"), &[c, co], init.normal(c))?,
        bb: p.register(format!("{name}.bb"), &[co], |_| 0.0)?,
        wo: p.register(format!("{name}.wo"), &[co * co, cfg.c_z], init.normal(co * co))?,
        bo: p.register(format!("{name}.bo"), &[cfg.c_z], |_| 0.0)?,
    })
}

impl ModelLayout {
    /// Registers every parameter with seeded random initialisation.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, PackedParams)> {
        cfg.validate()?;
        let mut p = PackedParams::new();
        let mut init = Init {
            rng: StdRng::seed_from_u64(seed),
        };
        let (hd, h) = (cfg.hd(), cfg.heads);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let n = |s: &str| format!("block{i}.{s}");
            blocks.push(BlockWeights {
                row: ga(&mut p, &mut init, &n("row_attn"), cfg.c_m, hd)?,
                row_bias: pb(&mut p, &mut init, &n("row_attn.pair_bias"), cfg.c_z, h)?,
                col: ga(&mut p, &mut init, &n("col_attn"), cfg.c_m, hd)?,
                msa_trans: trans(&mut p, &mut init, &n("msa_transition"), cfg.c_m, cfg.transition_factor)?,
                opm: opm(&mut p, &mut init, &n("outer_product_mean"), cfg)?,
                tri_start: ga(&mut p, &mut init, &n("tri_attn_start"), cfg.c_z, hd)?,
                tri_start_bias: pb(&mut p, &mut init, &n("tri_attn_start.pair_bias"), cfg.c_z, h)?,
                tri_end: ga(&mut p, &mut init, &n("tri_attn_end"), cfg.c_z, hd)?,
                tri_end_bias: pb(&mut p, &mut init, &n("tri_attn_end.pair_bias"), cfg.c_z, h)?,
                pair_trans: trans(&mut p, &mut init, &n("pair_transition"), cfg.c_z, cfg.transition_factor)?,
            });
        }
        let layout = ModelLayout {
            blocks,
            rec_msa_g: p.register("recycle.msa.gamma", &[cfg.c_m], |_| 1.0)?,
            rec_msa_b: p.register("recycle.msa.beta", &[cfg.c_m], |_| 0.0)?,
            rec_pair_g: p.register("recycle.pair.gamma", &[cfg.c_z], |_| 1.0)?,
            rec_pair_b: p.register("recycle.pair.beta", &[cfg.c_z], |_| 0.0)?,
        };
        Ok((layout, p))
    }
}

/// Sets every parameter whose name contains `pattern` to zero.
pub fn zero_matching(params: &mut PackedParams, pattern: &str) -> usize {
    let ids: Vec<SegId> = params
        .ids()
        .filter(|&id| params.segment(id).name.contains(pattern))
        .collect();
    for &id in &ids {
        params.get_mut(id).fill(0.0);
    }
    ids.len()
}

/// Path of the manifest written next to a checkpoint blob file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes every segment as a tensor blob into `path` and a tab-separated
/// `name<TAB>offset` manifest next to it.
pub fn save_checkpoint(params: &PackedParams, path: &Path) -> Result<()> {
    let mut blob = BufWriter::new(fs::File::create(path)?);
    let mut manifest = String::new();
    let mut offset = 0usize;
    for id in params.ids() {
        let seg = params.segment(id);
        let t = params.tensor(id);
        manifest.push_str(&format!("{}\t{offset}\n", seg.name));
        offset += io::write_tensor(&mut blob, &t)?;
    }
    blob.flush()?;
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

/// Loads values for every segment of `params` from a checkpoint.
pub fn load_checkpoint(params: &mut PackedParams, path: &Path) -> Result<()> {
    let mpath = manifest_path(path);
    let manifest = fs::read_to_string(&mpath)?;
    let mut blob = BufReader::new(fs::File::open(path)?);
    let mut seen = 0usize;
    for (i, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("{}:{}", mpath.display(), i + 1);
        let (name, off) = line.split_once('\t').ok_or_else(|| Error::Parse {
            location: loc(),
            msg: "expected name<TAB>offset".into(),
        })?;
        let off: u64 = off.trim().parse().map_err(|_| Error::Parse {
            location: loc(),
            msg: format!("bad offset `{off}`"),
        })?;
        let id = params.id(name).ok_or_else(|| Error::Parse {
            location: loc(),
            msg: format!("unknown parameter `{name}`"),
        })?;
        blob.seek(SeekFrom::Start(off))?;
        let t: Tensor = io::read_tensor(&mut blob.by_ref())?;
        if t.shape() != params.segment(id).shape.as_slice() {
            return Err(Error::Dimension {
                op: "load_checkpoint",
                lhs: params.segment(id).shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
        params.get_mut(id).copy_from_slice(t.data());
        seen += 1;
    }
    if seen != params.segments().len() {
        return Err(Error::Parse {
            location: mpath.display().to_string(),
            msg: format!("{seen} of {} parameters present", params.segments().len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_parameter_registered_once() {
        let cfg = ModelConfig::desk();
        let (layout, p) = ModelLayout::init(&cfg, 0).unwrap();
        assert_eq!(layout.blocks.len(), cfg.n_blocks);
        let mut covered = vec![0u8; p.len()];
        for s in p.segments() {
            for c in &mut covered[s.offset..s.offset + s.len] {
                *c += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::gradcheck();
        let a = ModelLayout::init(&cfg, 3).unwrap().1;
        let b = ModelLayout::init(&cfg, 3).unwrap().1;
        let c = ModelLayout::init(&cfg, 4).unwrap().1;
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = ModelConfig::gradcheck();
        let (_, p) = ModelLayout::init(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let (_, mut q) = ModelLayout::init(&cfg, 2).unwrap();
        load_checkpoint(&mut q, &path).unwrap();
        assert_eq!(p.data(), q.data());
        let manifest = fs::read_to_string(manifest_path(&path)).unwrap();
        assert_eq!(manifest.lines().count(), p.segments().len());
    }
}
