//! Pose sequences as CSV: `frame,joint,x,y,z` for 3D and `frame,joint,u,v` for 2D.
//!
//! Frames and joints are zero-indexed and must cover the full `F × J` grid
//! exactly once. Values are written in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{HtpError, Result};
use crate::tensor::Ten3;

const HEADER_3D: [&str; 5] = ["frame", "joint", "x", "y", "z"];
const HEADER_2D: [&str; 4] = ["frame", "joint", "u", "v"];

/// A `J × F × C` pose sequence with `C` = 3 (millimetres) or 2 (pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFile {
    pub poses: Ten3,
}

impl PoseFile {
    pub fn new(poses: Ten3) -> Result<Self> {
        let c = poses.shape().2;
        if c != 2 && c != 3 {
            return Err(HtpError::shape("PoseFile", "2 or 3 coordinates", c));
        }
        if !poses.all_finite() {
            return Err(HtpError::Format("pose values must be finite".into()));
        }
        Ok(PoseFile { poses })
    }

    pub fn joints(&self) -> usize {
        self.poses.shape().0
    }

    pub fn frames(&self) -> usize {
        self.poses.shape().1
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let (j, f, c) = self.poses.shape();
        let mut out = csv::Writer::from_writer(w);
        if c == 3 {
            out.write_record(HEADER_3D)?;
        } else {
            out.write_record(HEADER_2D)?;
        }
        let mut rec = Vec::with_capacity(2 + c);
        for p in 0..f {
            for a in 0..j {
                rec.clear();
                rec.push(p.to_string());
                rec.push(a.to_string());
                rec.extend((0..c).map(|k| self.poses.get(a, p, k).to_string()));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let c = if header == HEADER_3D {
            3
        } else if header == HEADER_2D {
            2
        } else {
            return Err(HtpError::Format(format!("unrecognised pose header {header:?}")));
        };
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| HtpError::Format(format!("row {}: {what}", line + 2));
            if rec.len() != 2 + c {
                return Err(bad("wrong number of fields"));
            }
            let frame: usize = rec[0].trim().parse().map_err(|_| bad("frame is not an index"))?;
            let joint: usize = rec[1].trim().parse().map_err(|_| bad("joint is not an index"))?;
            let mut v = [0.0f64; 3];
            for k in 0..c {
                v[k] = rec[2 + k].trim().parse().map_err(|_| bad("coordinate is not a number"))?;
                if !v[k].is_finite() {
                    return Err(bad("coordinate is not finite"));
                }
            }
            rows.push((frame, joint, v));
        }
        if rows.is_empty() {
            return Err(HtpError::Format("pose file has no rows".into()));
        }
        let f = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let j = rows.iter().map(|r| r.1).max().unwrap() + 1;
        if rows.len() != f * j {
            return Err(HtpError::Format(format!("expected {} rows for {f} frames x {j} joints, found {}", f * j, rows.len())));
        }
        let mut seen = vec![false; f * j];
        let mut poses = Ten3::zeros(j, f, c);
        for (p, a, v) in rows {
            if std::mem::replace(&mut seen[p * j + a], true) {
                return Err(HtpError::Format(format!("duplicate row for frame {p}, joint {a}")));
            }
            for k in 0..c {
                poses.set(a, p, k, v[k]);
            }
        }
        PoseFile::new(poses)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| HtpError::io_at(path, e))?))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        PoseFile::read_from(std::io::BufReader::new(std::fs::File::open(path).map_err(|e| HtpError::io_at(path, e))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = RngStream::new(3);
        for c in [2, 3] {
            let t = Ten3::from_fn(4, 5, c, |_, _, _| rng.normal() * 1e3);
            let mut buf = Vec::new();
            PoseFile::new(t.clone()).unwrap().write_to(&mut buf).unwrap();
            let back = PoseFile::read_from(buf.as_slice()).unwrap();
            assert!(back.poses.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(back.poses.shape(), t.shape());
        }
    }

    #[test]
    fn header_and_grid_are_checked() {
        assert!(PoseFile::read_from("frame,joint,a,b\n0,0,1,2\n".as_bytes()).is_err());
        assert!(PoseFile::read_from("frame,joint,u,v\n0,0,1,2\n1,1,1,2\n".as_bytes()).is_err());
        assert!(PoseFile::read_from("frame,joint,u,v\n0,0,1,2\n0,0,1,2\n".as_bytes()).is_err());
        assert!(PoseFile::read_from("frame,joint,u,v\n0,0,1,NaN\n".as_bytes()).is_err());
        let ok = PoseFile::read_from("frame,joint,u,v\n1,0,5,6\n0,0,1,2\n".as_bytes()).unwrap();
        assert_eq!(ok.poses.data(), &[1.0, 2.0, 5.0, 6.0]);
    }
}
