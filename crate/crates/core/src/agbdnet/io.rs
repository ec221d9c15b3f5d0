//! CNET ensemble container and footprint CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::net::{NetArch, NetParams};
use super::{Beam, Ensemble, GediFootprint, NormStats, LAT_ENCODING_TAG};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CNET";
const VERSION: u16 = 1;

pub fn write_cnet(path: &Path, ens: &Ensemble) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ens.arch.in_channels as u16).to_le_bytes())?;
    w.write_all(&(ens.arch.channels.len() as u16).to_le_bytes())?;
    for &c in &ens.arch.channels {
        w.write_all(&(c as u16).to_le_bytes())?;
    }
    w.write_all(&(ens.arch.patch as u16).to_le_bytes())?;
    let tag = LAT_ENCODING_TAG.as_bytes();
    w.write_all(&(tag.len() as u16).to_le_bytes())?;
    w.write_all(tag)?;
    for v in [
        ens.norm.height_mean,
        ens.norm.height_std,
        ens.norm.unc_mean,
        ens.norm.unc_std,
        ens.norm.y_scale,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(ens.members.len() as u16).to_le_bytes())?;
    for m in &ens.members {
        let flat = m.flatten();
        w.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in flat {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_cnet(path: &Path) -> Result<Ensemble> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad CNET magic {magic:?}")));
    }
    if read_u16(&mut r)? != VERSION {
        return Err(Error::Format("unsupported CNET version".into()));
    }
    let in_channels = read_u16(&mut r)? as usize;
    let n_layers = read_u16(&mut r)? as usize;
    let mut channels = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        channels.push(read_u16(&mut r)? as usize);
    }
    let patch = read_u16(&mut r)? as usize;
    let arch = NetArch {
        in_channels,
        channels,
        patch,
    };
    let tag_len = read_u16(&mut r)? as usize;
    let mut tag = vec![0u8; tag_len];
    r.read_exact(&mut tag)?;
    let norm = NormStats {
        height_mean: read_f64(&mut r)?,
        height_std: read_f64(&mut r)?,
        unc_mean: read_f64(&mut r)?,
        unc_std: read_f64(&mut r)?,
        y_scale: read_f64(&mut r)?,
    };
    let n_members = read_u16(&mut r)? as usize;
    let mut members = Vec::with_capacity(n_members);
    for _ in 0..n_members {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut blob = vec![0u8; n * 4];
        r.read_exact(&mut blob)?;
        let flat: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        members.push(NetParams::from_flat(&arch, &flat)?);
    }
    Ok(Ensemble {
        arch,
        members,
        norm,
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Footprint CSV: `id,date,lon,lat,x,y,agbd,quality_ok,beam`.
pub fn save_footprints(path: &Path, footprints: &[GediFootprint]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "date", "lon", "lat", "x", "y", "agbd", "quality_ok", "beam"])?;
    for f in footprints {
        w.write_record([
            f.id.as_str(),
            &f.date.format("%Y-%m-%d").to_string(),
            &format!("{}", f.lon),
            &format!("{}", f.lat),
            &format!("{}", f.x),
            &format!("{}", f.y),
            &format!("{}", f.agbd),
            if f.quality_ok { "1" } else { "0" },
            match f.beam {
                Beam::Power => "power",
                Beam::Coverage => "coverage",
            },
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_footprints(path: &Path) -> Result<Vec<GediFootprint>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Format(format!("footprint row missing field {i}")))
        };
        let quality = matches!(get(7)?, "1" | "true" | "TRUE");
        let beam = match get(8)? {
            "power" => Beam::Power,
            "coverage" => Beam::Coverage,
            other => return Err(Error::Format(format!("unknown beam '{other}'"))),
        };
        out.push(GediFootprint {
            id: get(0)?.to_string(),
            date: NaiveDate::parse_from_str(get(1)?, "%Y-%m-%d")
                .map_err(|e| Error::Format(format!("bad footprint date: {e}")))?,
            lon: parse_f64(get(2)?)?,
            lat: parse_f64(get(3)?)?,
            x: parse_f64(get(4)?)?,
            y: parse_f64(get(5)?)?,
            agbd: parse_f64(get(6)?)?,
            quality_ok: quality,
            beam,
        });
    }
    Ok(out)
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|e| Error::Format(format!("bad float '{s}': {e}")))
}
