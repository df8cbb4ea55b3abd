//! CSV and binary dumps of ensemble paths.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::EnsemblePath;
use crate::error::{Error, Result};
use crate::model::TimeGrid;

pub const BINARY_MAGIC: &[u8; 8] = b"MFPOENS\0";
pub const BINARY_VERSION: u32 = 1;

/// Writes one row per (time index, particle) with `t, i, x.., xhat.., z,
/// u..`; the terminal rows leave `u` empty. `stride` thins the particles.
pub fn write_csv(e: &EnsemblePath, path: &Path, stride: usize) -> Result<()> {
    let stride = stride.max(1);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string(), "particle".to_string()];
    header.extend((0..e.n).map(|d| format!("x{d}")));
    header.extend((0..e.n).map(|d| format!("xhat{d}")));
    header.push("z".into());
    header.extend((0..e.k).map(|c| format!("u{c}")));
    w.write_record(&header).map_err(csv_err)?;
    let steps = e.n_steps();
    for j in 0..=steps {
        let t = e.grid.t(j);
        for i in (0..e.n_particles).step_by(stride) {
            let mut rec = vec![format!("{t:e}"), i.to_string()];
            rec.extend(e.x_at(j, i).iter().map(|v| format!("{v:e}")));
            rec.extend(e.xhat_at(j, i).iter().map(|v| format!("{v:e}")));
            rec.push(format!("{:e}", e.z_at(j, i)));
            if j < steps {
                rec.extend(e.u_at(j, i).iter().map(|v| format!("{v:e}")));
            } else {
                rec.extend((0..e.k).map(|_| String::new()));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Full-precision dump. Layout (little endian): magic, version `u32`,
/// `n, k, M, n_steps` as `u64`, horizon `f64`, seed `u64`, then the `f64`
/// arrays `x, xhat, z, u, m, ubar, dw, dy`.
pub fn write_binary(e: &EnsemblePath, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    for v in [e.n, e.k, e.n_particles, e.n_steps()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&e.grid.horizon().to_le_bytes())?;
    w.write_all(&e.seed.to_le_bytes())?;
    for arr in [&e.x, &e.xhat, &e.z, &e.u, &e.m, &e.ubar, &e.dw, &e.dy] {
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<EnsemblePath> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Parse("not an ensemble dump".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != BINARY_VERSION {
        return Err(Error::Parse(format!("unsupported dump version {version}")));
    }
    let mut b8 = [0u8; 8];
    let mut next_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let n = next_u64(&mut r)? as usize;
    let k = next_u64(&mut r)? as usize;
    let mp = next_u64(&mut r)? as usize;
    let steps = next_u64(&mut r)? as usize;
    let horizon = f64::from_bits(next_u64(&mut r)?);
    let seed = next_u64(&mut r)?;
    let grid = TimeGrid::new(horizon, steps)?;
    let mut read_arr = |len: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let x = read_arr((steps + 1) * mp * n)?;
    let xhat = read_arr((steps + 1) * mp * n)?;
    let z = read_arr((steps + 1) * mp)?;
    let u = read_arr(steps * mp * k)?;
    let m = read_arr((steps + 1) * n)?;
    let ubar = read_arr(steps * k)?;
    let dw = read_arr(steps * mp)?;
    let dy = read_arr(steps * mp)?;
    Ok(EnsemblePath {
        n,
        k,
        n_particles: mp,
        seed,
        grid,
        x,
        xhat,
        z,
        u,
        m,
        ubar,
        dw,
        dy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfsim::{simulate_ensemble, ControlLaw, SimConfig};
    use crate::model::Scenario;

    #[test]
    fn binary_round_trip_is_exact() {
        let s = Scenario::smoke();
        let g = s.grid_with_steps(12).unwrap();
        let e = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(7, 5, g)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        write_binary(&e, &p).unwrap();
        assert_eq!(read_binary(&p).unwrap(), e);
    }

    #[test]
    fn binary_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.bin");
        std::fs::write(&p, b"NOTADUMPxxxxxxxxxxxx").unwrap();
        assert!(matches!(read_binary(&p), Err(Error::Parse(_))));
    }

    #[test]
    fn csv_has_a_row_per_point() {
        let s = Scenario::smoke();
        let g = s.grid_with_steps(5).unwrap();
        let e = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(4, 5, g)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_csv(&e, &p, 2).unwrap();
        let mut rd = csv::Reader::from_path(&p).unwrap();
        assert_eq!(rd.headers().unwrap().len(), 6);
        assert_eq!(rd.records().count(), 6 * 2);
    }
}
