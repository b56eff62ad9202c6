//! Frame store: one binary file per dataset, plus a comma-separated text
//! export for inspection.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "AMFS" | version u32
//! header: v f64 | fs f64 | signal_len u32 | area u8 | frame_count u32
//! per frame: frame_id u32 | channel u16 | present u8 |
//!            seg_start u32 | seg_end u32 | depth_mm f64 |
//!            samples f32 x signal_len
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    preprocess_frame, AcousticModel, Area, FrameSet, PeakAnnotation, RegionLabel,
};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AMFS";
const VERSION: u32 = 1;

pub fn write_frames(path: &Path, set: &FrameSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&set.acoustic.speed_mps.to_le_bytes())?;
    w.write_all(&set.acoustic.sample_rate_hz.to_le_bytes())?;
    w.write_all(&(set.acoustic.signal_len as u32).to_le_bytes())?;
    w.write_all(&[area_code(set.area)])?;
    w.write_all(&(set.frames.len() as u32).to_le_bytes())?;
    for (frame, ann) in &set.frames {
        if frame.samples.len() != set.acoustic.signal_len {
            return Err(Error::Shape(format!(
                "frame {} length {} != signal_len {}",
                frame.frame_id,
                frame.samples.len(),
                set.acoustic.signal_len
            )));
        }
        w.write_all(&frame.frame_id.to_le_bytes())?;
        w.write_all(&frame.region.channel().to_le_bytes())?;
        w.write_all(&[ann.present as u8])?;
        w.write_all(&(ann.seg_start as u32).to_le_bytes())?;
        w.write_all(&(ann.seg_end as u32).to_le_bytes())?;
        w.write_all(&ann.depth_mm.to_le_bytes())?;
        for &s in &frame.samples {
            w.write_all(&(s as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<FrameSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a frame store (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported frame store version {version}"
        )));
    }
    let v = read_f64(&mut r)?;
    let fs = read_f64(&mut r)?;
    let signal_len = read_u32(&mut r)? as usize;
    let area = area_from_code(read_u8(&mut r)?)?;
    let acoustic = AcousticModel::new(v, fs, signal_len)?;
    let count = read_u32(&mut r)? as usize;

    let mut frames = Vec::with_capacity(count);
    let mut sample_buf = vec![0u8; signal_len * 4];
    for _ in 0..count {
        let frame_id = read_u32(&mut r)?;
        let channel = read_u16(&mut r)?;
        let present = read_u8(&mut r)? != 0;
        let seg_start = read_u32(&mut r)? as usize;
        let seg_end = read_u32(&mut r)? as usize;
        let depth_mm = read_f64(&mut r)?;
        r.read_exact(&mut sample_buf)?;
        let samples: Vec<f64> = sample_buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let region = RegionLabel::new(area, channel)?;
        let frame = preprocess_frame(&samples, region, frame_id, signal_len)?;
        let ann = PeakAnnotation {
            seg_start,
            seg_end,
            depth_mm,
            present,
        };
        ann.validate(&acoustic)?;
        frames.push((frame, ann));
    }
    Ok(FrameSet {
        acoustic,
        area,
        frames,
    })
}

/// Comma-separated dump of the store, one row per frame, samples inline.
pub fn export_csv(path: &Path, set: &FrameSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "frame_id,channel,region,present,seg_start,seg_end,depth_mm"
    )?;
    for i in 0..set.acoustic.signal_len {
        write!(w, ",s{i}")?;
    }
    writeln!(w)?;
    for (frame, ann) in &set.frames {
        write!(
            w,
            "{},{},{},{},{},{},{:.6}",
            frame.frame_id,
            frame.region.channel(),
            frame.region.name(),
            ann.present as u8,
            ann.seg_start,
            ann.seg_end,
            ann.depth_mm
        )?;
        for &s in &frame.samples {
            write!(w, ",{}", s as f32)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn area_code(area: Area) -> u8 {
    match area {
        Area::Femur => 0,
        Area::Tibia => 1,
    }
}

fn area_from_code(code: u8) -> Result<Area> {
    match code {
        0 => Ok(Area::Femur),
        1 => Ok(Area::Tibia),
        other => Err(Error::Format(format!("unknown area code {other}"))),
    }
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
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

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::index_to_depth;

    fn tiny_set() -> FrameSet {
        let acoustic = AcousticModel::with_signal_len(64);
        let region = RegionLabel::new(Area::Femur, 12).unwrap();
        let mut raw = vec![1.0; 64];
        raw[30] = 4096.0;
        let frame = preprocess_frame(&raw, region, 3, 64).unwrap();
        let depth = index_to_depth(30, &acoustic).unwrap();
        let ann = PeakAnnotation::at_index(30, depth, &acoustic).unwrap();
        FrameSet {
            acoustic,
            area: Area::Femur,
            frames: vec![(frame, ann)],
        }
    }

    #[test]
    fn roundtrip_preserves_frames() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.amfs");
        let set = tiny_set();
        write_frames(&path, &set).unwrap();
        let back = read_frames(&path).unwrap();
        assert_eq!(back.frames.len(), 1);
        assert_eq!(back.frames[0].0.samples, set.frames[0].0.samples);
        assert_eq!(back.frames[0].1, set.frames[0].1);
        assert_eq!(back.area, Area::Femur);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a frame store").unwrap();
        assert!(matches!(read_frames(&path), Err(Error::Format(_))));
    }

    #[test]
    fn csv_export_has_one_row_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.csv");
        let set = tiny_set();
        export_csv(&path, &set).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + set.frames.len());
        assert!(text.starts_with("frame_id,channel,region,present"));
    }
}
