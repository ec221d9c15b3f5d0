//! CGBM model container: boosted-ensemble header plus flattened node arrays
//! per tree, all little-endian, with a version field for forward
//! compatibility.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::gbr::{GbrModel, Loss};
use super::tree::{Tree, TreeNode};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CGBM";
const VERSION: u16 = 1;

pub fn write_cgbm(path: &Path, model: &GbrModel) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (loss_tag, delta) = match model.loss {
        Loss::Huber { delta } => (0u8, delta),
        Loss::Squared => (1u8, 0.0),
    };
    w.write_all(&[loss_tag])?;
    w.write_all(&delta.to_le_bytes())?;
    w.write_all(&model.learning_rate.to_le_bytes())?;
    w.write_all(&model.init_value.to_le_bytes())?;
    w.write_all(&(model.n_features as u32).to_le_bytes())?;
    let tag = model.feature_order_tag.as_bytes();
    w.write_all(&(tag.len() as u16).to_le_bytes())?;
    w.write_all(tag)?;
    w.write_all(&(model.trees.len() as u32).to_le_bytes())?;
    for tree in &model.trees {
        w.write_all(&(tree.nodes.len() as u32).to_le_bytes())?;
        for n in &tree.nodes {
            w.write_all(&[n.is_leaf as u8])?;
            w.write_all(&n.feature.to_le_bytes())?;
            w.write_all(&n.threshold.to_le_bytes())?;
            w.write_all(&n.left.to_le_bytes())?;
            w.write_all(&n.right.to_le_bytes())?;
            w.write_all(&n.leaf_value.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_cgbm(path: &Path) -> Result<GbrModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad CGBM magic {magic:?}")));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CGBM version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let delta = read_f64(&mut r)?;
    let loss = match tag[0] {
        0 => Loss::Huber { delta },
        1 => Loss::Squared,
        t => return Err(Error::Format(format!("unknown loss tag {t}"))),
    };
    let learning_rate = read_f64(&mut r)?;
    let init_value = read_f64(&mut r)?;
    let n_features = read_u32(&mut r)? as usize;
    let tag_len = read_u16(&mut r)? as usize;
    let mut tag_bytes = vec![0u8; tag_len];
    r.read_exact(&mut tag_bytes)?;
    let feature_order_tag = String::from_utf8(tag_bytes)
        .map_err(|_| Error::Format("feature order tag is not UTF-8".into()))?;
    let n_trees = read_u32(&mut r)? as usize;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let n_nodes = read_u32(&mut r)? as usize;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            nodes.push(TreeNode {
                is_leaf: flag[0] != 0,
                feature: read_u32(&mut r)?,
                threshold: read_f32(&mut r)?,
                left: read_u32(&mut r)?,
                right: read_u32(&mut r)?,
                leaf_value: read_f32(&mut r)?,
            });
        }
        trees.push(Tree { nodes });
    }
    Ok(GbrModel {
        init_value,
        trees,
        learning_rate,
        loss,
        feature_order_tag,
        n_features,
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boosting::{gbr_fit, gbr_predict, GbrConfig};

    #[test]
    fn model_roundtrip_preserves_predictions() {
        let x: Vec<f32> = (0..60).map(|i| (i % 10) as f32 / 10.0).collect();
        let y: Vec<f64> = (0..30).map(|i| (i % 7) as f64 / 7.0).collect();
        let model = gbr_fit(
            &x,
            2,
            &y,
            None,
            &GbrConfig {
                n_estimators: 12,
                learning_rate: 0.2,
                max_depth: 3,
                min_samples_leaf: 1,
                loss: Loss::Huber { delta: 0.1 },
                seed: 0,
            },
        )
        .unwrap();
        let dir = std::env::temp_dir().join("canopy-ledger-cgbm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("model.cgbm");
        write_cgbm(&p, &model).unwrap();
        let back = read_cgbm(&p).unwrap();
        assert_eq!(back.init_value, model.init_value);
        assert_eq!(back.feature_order_tag, model.feature_order_tag);
        assert_eq!(
            gbr_predict(&back, &x, 2).unwrap(),
            gbr_predict(&model, &x, 2).unwrap()
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("canopy-ledger-cgbm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.cgbm");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(read_cgbm(&p), Err(Error::Format(_))));
    }
}
