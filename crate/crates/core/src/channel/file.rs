//! Binary dataset file format.
//!
//! Layout (all little-endian): magic `BFDS`, version, shape/carrier/seed/noise
//! header, then one record per sample with `client_id`, `ue_index`, `label`,
//! `ul_snr_db` and the two channel grids as interleaved re/im f32. A JSON
//! sidecar written next to the file carries the generating config and split
//! manifests (see the data module).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use super::{CGrid, ChannelSample, NoiseMode, NoiseModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BFDS";
const VERSION: u16 = 1;

/// Shape and provenance metadata stored in the dataset file header.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub subcarriers_ul: usize,
    pub antennas_ul: usize,
    pub subcarriers_dl: usize,
    pub antennas_dl: usize,
    pub num_beams: usize,
    pub num_clients: usize,
    pub carrier_ul_hz: f64,
    pub carrier_dl_hz: f64,
    pub bandwidth_ul_hz: f64,
    pub bandwidth_dl_hz: f64,
    pub seed: u64,
    pub noise: NoiseModel,
}

impl DatasetHeader {
    pub fn subcarrier_bandwidth_dl(&self) -> f64 {
        self.bandwidth_dl_hz / self.subcarriers_dl as f64
    }
}

fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    Ok(u16::from_le_bytes(read_exact::<2>(r)?))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact::<8>(r)?))
}

fn write_grid(w: &mut impl Write, grid: &CGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(grid.data().len() * 8);
    for c in grid.data() {
        buf.extend_from_slice(&(c.re as f32).to_le_bytes());
        buf.extend_from_slice(&(c.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_grid(r: &mut impl Read, subcarriers: usize, antennas: usize) -> Result<CGrid> {
    let n = subcarriers * antennas;
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let re = f32::from_le_bytes(buf[i * 8..i * 8 + 4].try_into().unwrap());
        let im = f32::from_le_bytes(buf[i * 8 + 4..i * 8 + 8].try_into().unwrap());
        data.push(Complex64::new(re as f64, im as f64));
    }
    CGrid::from_data(data, subcarriers, antennas)
}

pub fn write_dataset(
    path: impl AsRef<Path>,
    header: &DatasetHeader,
    samples: &[ChannelSample],
) -> Result<()> {
    for s in samples {
        if s.h_ul.subcarriers() != header.subcarriers_ul
            || s.h_ul.antennas() != header.antennas_ul
            || s.h_dl.subcarriers() != header.subcarriers_dl
            || s.h_dl.antennas() != header.antennas_dl
        {
            return Err(Error::invalid("sample shape does not match dataset header"));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u16(&mut w, VERSION)?;
    write_u16(&mut w, header.subcarriers_ul as u16)?;
    write_u16(&mut w, header.antennas_ul as u16)?;
    write_u16(&mut w, header.subcarriers_dl as u16)?;
    write_u16(&mut w, header.antennas_dl as u16)?;
    write_u16(&mut w, header.num_beams as u16)?;
    write_u16(&mut w, header.num_clients as u16)?;
    write_u32(&mut w, samples.len() as u32)?;
    write_f64(&mut w, header.carrier_ul_hz)?;
    write_f64(&mut w, header.carrier_dl_hz)?;
    write_f64(&mut w, header.bandwidth_ul_hz)?;
    write_f64(&mut w, header.bandwidth_dl_hz)?;
    write_u64(&mut w, header.seed)?;
    let mode = match header.noise.mode {
        NoiseMode::FixedSnr => 0u8,
        NoiseMode::Physics => 1u8,
    };
    w.write_all(&[mode])?;
    write_f64(&mut w, header.noise.snr_db)?;
    write_f64(&mut w, header.noise.ue_tx_power_dbm)?;
    write_f64(&mut w, header.noise.bs_tx_power_dbm)?;
    write_f64(&mut w, header.noise.noise_figure_db)?;

    for s in samples {
        write_u32(&mut w, s.client_id as u32)?;
        write_u32(&mut w, s.ue_index as u32)?;
        write_u32(&mut w, s.label as u32)?;
        write_f64(&mut w, s.ul_snr_db)?;
        write_grid(&mut w, &s.h_ul)?;
        write_grid(&mut w, &s.h_dl)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<ChannelSample>)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a beamfed dataset file".into()));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let subcarriers_ul = read_u16(&mut r)? as usize;
    let antennas_ul = read_u16(&mut r)? as usize;
    let subcarriers_dl = read_u16(&mut r)? as usize;
    let antennas_dl = read_u16(&mut r)? as usize;
    let num_beams = read_u16(&mut r)? as usize;
    let num_clients = read_u16(&mut r)? as usize;
    let num_samples = read_u32(&mut r)? as usize;
    let carrier_ul_hz = read_f64(&mut r)?;
    let carrier_dl_hz = read_f64(&mut r)?;
    let bandwidth_ul_hz = read_f64(&mut r)?;
    let bandwidth_dl_hz = read_f64(&mut r)?;
    let seed = read_u64(&mut r)?;
    let mode = match read_exact::<1>(&mut r)?[0] {
        0 => NoiseMode::FixedSnr,
        1 => NoiseMode::Physics,
        other => return Err(Error::Format(format!("unknown noise mode {other}"))),
    };
    let noise = NoiseModel {
        mode,
        snr_db: read_f64(&mut r)?,
        ue_tx_power_dbm: read_f64(&mut r)?,
        bs_tx_power_dbm: read_f64(&mut r)?,
        noise_figure_db: read_f64(&mut r)?,
    };
    let header = DatasetHeader {
        subcarriers_ul,
        antennas_ul,
        subcarriers_dl,
        antennas_dl,
        num_beams,
        num_clients,
        carrier_ul_hz,
        carrier_dl_hz,
        bandwidth_ul_hz,
        bandwidth_dl_hz,
        seed,
        noise,
    };
    let mut samples = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let client_id = read_u32(&mut r)? as usize;
        let ue_index = read_u32(&mut r)? as usize;
        let label = read_u32(&mut r)? as usize;
        let ul_snr_db = read_f64(&mut r)?;
        let h_ul = read_grid(&mut r, subcarriers_ul, antennas_ul)?;
        let h_dl = read_grid(&mut r, subcarriers_dl, antennas_dl)?;
        samples.push(ChannelSample {
            h_ul,
            h_dl,
            label,
            client_id,
            ue_index,
            ul_snr_db,
        });
    }
    Ok((header, samples))
}
