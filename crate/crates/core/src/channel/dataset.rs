//! CSV dump of instance batches.
//!
//! One row per instance, all instances sharing the same dimensions:
//!
//! ```text
//! n_t,n_r,bits_per_axis,snr_db,h_0..h_{4 N_r N_t - 1},y_0..y_{2 N_r - 1},
//! bits_0..bits_{2 N_t nb - 1},sigma2_0..sigma2_{2 N_r - 1}
//! ```
//!
//! `h` and `bits` are flattened row-major. Floats are written in shortest
//! round-trip form, so a dump reloads bit-exactly. `x` is not stored; it is
//! re-modulated from the bits on load.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use super::{modulate, Constellation, MimoInstance, SystemDims};
use crate::error::{Error, Result};

fn header(dims: SystemDims, nb: usize) -> Vec<String> {
    let mut cols = vec![
        "n_t".to_string(),
        "n_r".to_string(),
        "bits_per_axis".to_string(),
        "snr_db".to_string(),
    ];
    let (rx, tx) = (dims.real_rx(), dims.real_tx());
    cols.extend((0..rx * tx).map(|i| format!("h_{i}")));
    cols.extend((0..rx).map(|i| format!("y_{i}")));
    cols.extend((0..tx * nb).map(|i| format!("bits_{i}")));
    cols.extend((0..rx).map(|i| format!("sigma2_{i}")));
    cols
}

/// Writes instances as CSV. All instances must share dimensions.
pub fn write_instances<W: Write>(out: W, instances: &[MimoInstance]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let Some(first) = instances.first() else {
        wtr.flush()?;
        return Ok(());
    };
    let (dims, nb) = (first.dims(), first.bits_per_axis());
    wtr.write_record(header(dims, nb))?;
    for inst in instances {
        if inst.dims() != dims || inst.bits_per_axis() != nb {
            return Err(Error::Dataset("instances in one dump must share dimensions".into()));
        }
        let mut rec = vec![
            dims.n_t.to_string(),
            dims.n_r.to_string(),
            nb.to_string(),
            inst.snr_db.to_string(),
        ];
        for r in 0..inst.h.nrows() {
            for c in 0..inst.h.ncols() {
                rec.push(inst.h[(r, c)].to_string());
            }
        }
        rec.extend(inst.y.iter().map(f64::to_string));
        for r in 0..inst.bits.nrows() {
            for c in 0..nb {
                rec.push(inst.bits[(r, c)].to_string());
            }
        }
        rec.extend(inst.sigma2.iter().map(f64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, name: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Dataset(format!("cannot parse `{field}` in column {name}")))
}

/// Reads a dump written by [`write_instances`].
pub fn read_instances<R: Read>(input: R) -> Result<Vec<MimoInstance>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let n_t: usize = parse(&rec[0], "n_t")?;
        let n_r: usize = parse(&rec[1], "n_r")?;
        let nb: usize = parse(&rec[2], "bits_per_axis")?;
        let constellation = Constellation::from_bits_per_axis(nb)
            .map_err(|_| Error::Dataset(format!("unsupported bits_per_axis {nb}")))?;
        let dims = SystemDims::new(n_t, n_r);
        let (rx, tx) = (dims.real_rx(), dims.real_tx());
        let expected = 4 + rx * tx + rx + tx * nb + rx;
        if rec.len() != expected {
            return Err(Error::Dataset(format!(
                "row has {} fields, expected {expected}",
                rec.len()
            )));
        }
        let snr_db: f64 = parse(&rec[3], "snr_db")?;
        let mut it = rec.iter().skip(4);
        let mut floats = |n: usize, name: &str| -> Result<Vec<f64>> {
            (0..n).map(|_| parse(it.next().unwrap(), name)).collect()
        };
        let h = DMatrix::from_row_slice(rx, tx, &floats(rx * tx, "h")?);
        let y = DVector::from_vec(floats(rx, "y")?);
        let bits_raw = floats(tx * nb, "bits")?;
        let sigma2 = DVector::from_vec(floats(rx, "sigma2")?);
        let bits = DMatrix::from_row_iterator(tx, nb, bits_raw.iter().map(|&b| b as u8));
        let x = modulate(&bits, &constellation)?;
        out.push(MimoInstance {
            h,
            y,
            x,
            sigma2,
            bits,
            snr_db,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_instance;
    use crate::rng::rng_from_seed;

    #[test]
    fn dump_reloads_exactly() {
        let c = Constellation::qpsk();
        let mut rng = rng_from_seed(5);
        let insts: Vec<_> = (0..4)
            .map(|i| sample_instance(SystemDims::new(2, 3), &c, i as f64 * 3.3, &mut rng))
            .collect();
        let mut buf = Vec::new();
        write_instances(&mut buf, &insts).unwrap();
        let back = read_instances(buf.as_slice()).unwrap();
        assert_eq!(back, insts);
    }

    #[test]
    fn truncated_row_is_an_error() {
        let data = "n_t,n_r,bits_per_axis,snr_db\n1,1,1,0.0\n";
        assert!(matches!(read_instances(data.as_bytes()), Err(Error::Csv(_)) | Err(Error::Dataset(_))));
    }
}
