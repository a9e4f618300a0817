//! The `SCVX` grid file format.
//!
//! Little-endian layout:
//!
//! ```text
//! "SCVX"  u32 version = 1
//! u32 x, u32 y, u32 z
//! u8 domain (0 scan, 1 cad, 2 mask)
//! u16 id length, UTF-8 id bytes
//! ceil(x*y*z / 8) bytes of occupancy, x-major, LSB-first within a byte
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use bitvec::prelude::*;

use super::{Dims, GridDomain, OccupancyGrid};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SCVX";
const VERSION: u32 = 1;

pub fn write_grid<W: Write>(mut w: W, grid: &OccupancyGrid) -> Result<()> {
    let d = grid.dims();
    let id = grid.object_id().as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::format("SCVX", format!("object id of {} bytes", id.len())))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for n in d.as_array() {
        let n = u32::try_from(n).map_err(|_| Error::format("SCVX", "dimension exceeds u32"))?;
        w.write_all(&n.to_le_bytes())?;
    }
    w.write_all(&[grid.domain().code()])?;
    w.write_all(&id_len.to_le_bytes())?;
    w.write_all(id)?;
    // Trailing bits of the last byte are always zero in a BitVec we built.
    w.write_all(grid.packed_bytes())?;
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<OccupancyGrid> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("SCVX", "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format("SCVX", format!("unsupported version {version}")));
    }
    let dims = Dims::new(
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
    );
    if dims.cells() == 0 {
        return Err(Error::format("SCVX", format!("empty dims {dims}")));
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let domain = GridDomain::from_code(code[0])
        .ok_or_else(|| Error::format("SCVX", format!("unknown domain code {}", code[0])))?;
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut id)?;
    let id = String::from_utf8(id).map_err(|_| Error::format("SCVX", "object id is not UTF-8"))?;

    let mut packed = vec![0u8; dims.cells().div_ceil(8)];
    r.read_exact(&mut packed)?;
    let mut bits = BitVec::<u8, Lsb0>::from_vec(packed);
    bits.truncate(dims.cells());
    bits.set_uninitialized(false);
    OccupancyGrid::from_bits(dims, bits, id, domain)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_grid_file(path: impl AsRef<Path>, grid: &OccupancyGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

pub fn read_grid_file(path: impl AsRef<Path>) -> Result<OccupancyGrid> {
    read_grid(BufReader::new(File::open(path)?))
}
