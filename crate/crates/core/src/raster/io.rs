//! CGRD container format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    4 bytes  "CGRD"
//! version  u16      1
//! flags    u16      0
//! width    u32
//! height   u32
//! bands    u16
//! dtype    u16      0 = float32
//! gt       6 x f64  origin_x, pixel_size_x, 0, origin_y, 0, pixel_size_y
//! nodata   f32
//! crs_len  u16      followed by crs_len bytes of UTF-8
//! payload  width*height*bands x f32, band-major, row-major
//! ```
//!
//! Write-then-read is byte identical, including NaN payload bit patterns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{GeoTransform, RasterGrid};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CGRD";
const VERSION: u16 = 1;
const DTYPE_F32: u16 = 0;

pub fn write_cgrd(path: &Path, grid: &RasterGrid) -> Result<()> {
    if grid.data.len() != grid.width * grid.height * grid.bands {
        return Err(Error::Shape(format!(
            "grid data length {} inconsistent with {}x{}x{}",
            grid.data.len(),
            grid.width,
            grid.height,
            grid.bands
        )));
    }
    if grid.crs_label.len() > u16::MAX as usize {
        return Err(Error::Argument("crs label longer than 65535 bytes".into()));
    }
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            std::fs::create_dir_all(p)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&(grid.width as u32).to_le_bytes())?;
    w.write_all(&(grid.height as u32).to_le_bytes())?;
    w.write_all(&(grid.bands as u16).to_le_bytes())?;
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    let t = &grid.transform;
    for v in [
        t.origin_x,
        t.pixel_size_x,
        0.0,
        t.origin_y,
        0.0,
        t.pixel_size_y,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&grid.nodata.to_le_bytes())?;
    w.write_all(&(grid.crs_label.len() as u16).to_le_bytes())?;
    w.write_all(grid.crs_label.as_bytes())?;
    for &v in &grid.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cgrd(path: &Path) -> Result<RasterGrid> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let _flags = read_u16(&mut r)?;
    let width = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let bands = read_u16(&mut r)? as usize;
    let dtype = read_u16(&mut r)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let mut gt = [0f64; 6];
    for v in gt.iter_mut() {
        *v = read_f64(&mut r)?;
    }
    let nodata = read_f32(&mut r)?;
    let crs_len = read_u16(&mut r)? as usize;
    let mut crs_bytes = vec![0u8; crs_len];
    read_exact(&mut r, &mut crs_bytes)?;
    let crs_label = String::from_utf8(crs_bytes)
        .map_err(|_| Error::Format("crs label is not valid UTF-8".into()))?;

    let n = width * height * bands;
    let mut payload = vec![0u8; n * 4];
    read_exact(&mut r, &mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let transform = GeoTransform::new(gt[0], gt[3], gt[1], gt[5])?;
    Ok(RasterGrid {
        width,
        height,
        bands,
        transform,
        nodata,
        crs_label,
        data,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::Length {
                expected: buf.len(),
                got: filled,
            });
        }
        filled += n;
    }
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::DEFAULT_NODATA;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("canopy-ledger-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let t = GeoTransform::new(100.0, 900.0, 10.0, -10.0).unwrap();
        let g = RasterGrid::from_data(2, 2, 1, t, vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .with_crs("EPSG:32630");
        let p1 = tmp("rt1.cgrd");
        let p2 = tmp("rt2.cgrd");
        write_cgrd(&p1, &g).unwrap();
        let back = read_cgrd(&p1).unwrap();
        write_cgrd(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(back, g);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let p = tmp("badmagic.cgrd");
        std::fs::write(&p, b"XXXXrest-of-file").unwrap();
        assert!(matches!(read_cgrd(&p), Err(Error::Format(_))));
    }

    #[test]
    fn nodata_preserved_exactly() {
        let t = GeoTransform::new(0.0, 0.0, 1.0, -1.0).unwrap();
        let g = RasterGrid::filled(1, 1, 1, t, 5.0).with_nodata(DEFAULT_NODATA);
        let p = tmp("nodata.cgrd");
        write_cgrd(&p, &g).unwrap();
        assert_eq!(read_cgrd(&p).unwrap().nodata, -9999.0);
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let t = GeoTransform::new(0.0, 0.0, 1.0, -1.0).unwrap();
        let g = RasterGrid::filled(4, 4, 2, t, 1.0);
        let p = tmp("trunc.cgrd");
        write_cgrd(&p, &g).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_cgrd(&p), Err(Error::Length { .. })));
    }
}
