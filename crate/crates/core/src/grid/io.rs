//! TDGRID1 binary grid files and CSV export.
//!
//! A TDGRID1 file is one ASCII header line `TDGRID1 nx ny r h x0 y0`, then
//! `nx*ny` mask bytes (0 outside, 1 interior, 2 boundary), then `r` fields of
//! `nx*ny` little-endian `f64` values each, all in row-major lattice order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{csv_row, g17};

use super::{DiscreteDomain, NodeKind, ScalarField, VField};

pub const MAGIC: &str = "TDGRID1";

#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub x0: f64,
    pub y0: f64,
    pub mask: Vec<u8>,
    pub fields: Vec<Vec<f64>>,
}

impl GridFile {
    pub fn from_fields(dom: &DiscreteDomain, fields: &[&ScalarField]) -> Self {
        let (x0, y0) = dom.origin();
        GridFile {
            nx: dom.nx(),
            ny: dom.ny(),
            h: dom.h(),
            x0,
            y0,
            mask: dom.mask().iter().map(|&m| m as u8).collect(),
            fields: fields.iter().map(|f| f.values.clone()).collect(),
        }
    }

    pub fn from_vfield(dom: &DiscreteDomain, v: &VField) -> Self {
        let refs: Vec<&ScalarField> = v.comps.iter().collect();
        Self::from_fields(dom, &refs)
    }

    pub fn rank(&self) -> usize {
        self.fields.len()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            MAGIC,
            self.nx,
            self.ny,
            self.fields.len(),
            g17(self.h),
            g17(self.x0),
            g17(self.y0)
        )?;
        w.write_all(&self.mask)?;
        for field in &self.fields {
            for v in field {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 7 || parts[0] != MAGIC {
            return Err(Error::Format(format!("bad TDGRID1 header: {:?}", header.trim_end())));
        }
        let int = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad integer {s:?} in header")))
        };
        let float = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad number {s:?} in header")))
        };
        let (nx, ny, rank) = (int(parts[1])?, int(parts[2])?, int(parts[3])?);
        let (h, x0, y0) = (float(parts[4])?, float(parts[5])?, float(parts[6])?);
        let n = nx
            .checked_mul(ny)
            .ok_or_else(|| Error::Format("lattice too large".into()))?;
        let mut mask = vec![0u8; n];
        r.read_exact(&mut mask)
            .map_err(|_| Error::Format("truncated mask".into()))?;
        if let Some(b) = mask.iter().find(|&&b| NodeKind::from_byte(b).is_none()) {
            return Err(Error::Format(format!("invalid mask byte {b}")));
        }
        let mut fields = Vec::with_capacity(rank);
        let mut buf = vec![0u8; 8 * n];
        for c in 0..rank {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated field {c}")))?;
            fields.push(
                buf.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            );
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(GridFile {
            nx,
            ny,
            h,
            x0,
            y0,
            mask,
            fields,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }

    /// Checks that the header and mask describe `dom`'s lattice.
    pub fn check_lattice(&self, dom: &DiscreteDomain) -> Result<()> {
        let (x0, y0) = dom.origin();
        if self.nx != dom.nx() || self.ny != dom.ny() {
            return Err(Error::Format(format!(
                "lattice {}x{} does not match domain {}x{}",
                self.nx,
                self.ny,
                dom.nx(),
                dom.ny()
            )));
        }
        if self.h != dom.h() || self.x0 != x0 || self.y0 != y0 {
            return Err(Error::Format(format!(
                "grid h={} origin=({}, {}) does not match domain h={} origin=({}, {})",
                self.h,
                self.x0,
                self.y0,
                dom.h(),
                x0,
                y0
            )));
        }
        if self.mask.iter().zip(dom.mask()).any(|(&a, &b)| a != b as u8) {
            return Err(Error::Format("mask does not match domain".into()));
        }
        Ok(())
    }

    pub fn scalar(&self, c: usize) -> ScalarField {
        ScalarField {
            values: self.fields[c].clone(),
        }
    }

    pub fn to_vfield(&self) -> VField {
        VField {
            comps: (0..self.rank()).map(|c| self.scalar(c)).collect(),
        }
    }
}

/// Writes `x,y,comp1,...,compr` rows for every interior and boundary node.
pub fn write_csv<W: Write>(mut w: W, dom: &DiscreteDomain, fields: &[&ScalarField]) -> Result<()> {
    let mut header = vec!["x".to_string(), "y".to_string()];
    header.extend((1..=fields.len()).map(|c| format!("comp{c}")));
    writeln!(w, "{}", header.join(","))?;
    let mut row = Vec::with_capacity(fields.len() + 2);
    for k in dom.nodes() {
        let (x, y) = dom.coords(k);
        row.clear();
        row.push(x);
        row.push(y);
        row.extend(fields.iter().map(|f| f.values[k]));
        writeln!(w, "{}", csv_row(&row))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, dom: &DiscreteDomain, fields: &[&ScalarField]) -> Result<()> {
    write_csv(BufWriter::new(File::create(path)?), dom, fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DomainSpec;
    use proptest::prelude::*;

    #[test]
    fn header_and_layout_are_bit_exact() {
        let d = DomainSpec::rectangle(0.0, 1.0, 0.0, 1.0, 0.5).build().unwrap();
        let f = ScalarField::from_fn(&d, |x, y| x + 10.0 * y);
        let mut buf = Vec::new();
        GridFile::from_fields(&d, &[&f]).write_to(&mut buf).unwrap();
        let header = b"TDGRID1 3 3 1 0.5 0 0\n";
        assert_eq!(&buf[..header.len()], header);
        let mask = &buf[header.len()..header.len() + 9];
        assert_eq!(mask, &[2, 2, 2, 2, 1, 2, 2, 2, 2]);
        let body = &buf[header.len() + 9..];
        assert_eq!(body.len(), 9 * 8);
        // node (i=1, j=2) -> index 7 -> x = 0.5, y = 1.0
        let v = f64::from_le_bytes(body[7 * 8..8 * 8].try_into().unwrap());
        assert_eq!(v, 10.5);
    }

    #[test]
    fn truncated_and_bad_files_are_rejected() {
        assert!(GridFile::read_from(&b"TDGRID2 1 1 1 1 0 0\n\x01"[..]).is_err());
        assert!(GridFile::read_from(&b"TDGRID1 2 2 1 1 0 0\n\x01\x01"[..]).is_err());
        assert!(GridFile::read_from(&b"TDGRID1 1 1 0 1 0 0\n\x07"[..]).is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_node() {
        let d = DomainSpec::rectangle(0.0, 1.0, 0.0, 1.0, 0.5).build().unwrap();
        let a = ScalarField::constant(&d, 0.25);
        let b = ScalarField::constant(&d, -0.25);
        let mut buf = Vec::new();
        write_csv(&mut buf, &d, &[&a, &b]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,y,comp1,comp2");
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[5], "0.5,0.5,0.25,-0.25");
    }

    proptest! {
        #[test]
        fn round_trip(vals in proptest::collection::vec(-1e6..1e6f64, 25 * 2), h in 0.01..1.0f64) {
            let d = DomainSpec::disk(0.0, 0.0, 1.5 * h, h).build().unwrap();
            let n = d.len();
            let f0 = ScalarField { values: (0..n).map(|k| vals[k % vals.len()]).collect() };
            let f1 = ScalarField { values: (0..n).map(|k| -vals[(k + 3) % vals.len()]).collect() };
            let g = GridFile::from_fields(&d, &[&f0, &f1]);
            let mut buf = Vec::new();
            g.write_to(&mut buf).unwrap();
            let back = GridFile::read_from(&buf[..]).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert!(back.check_lattice(&d).is_ok());
        }
    }
}
