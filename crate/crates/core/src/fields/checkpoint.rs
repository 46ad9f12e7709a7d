//! Binary checkpoint of a [`NeuralModel`].
//!
//! Layout (little-endian): magic `NLRC`, `u32` version, `u32` net count, then
//! per net: `u8` role (0 = sdf, 1 = radiance), `u8` activation tag, two `f64`
//! omegas, `u32` Fourier k, `u32` layer count + 1, the `u32` widths, `u64`
//! parameter count and the `f32` parameters.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{Activation, FieldError, FieldNetwork, FourierEncoding, NeuralModel, RadianceField, SdfField};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NLRC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get<const N: usize, Rd: Read>(r: &mut Rd) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn write_net<W: Write>(
    w: &mut W,
    role: u8,
    net: &FieldNetwork<f32>,
    fourier_k: usize,
) -> io::Result<()> {
    let (o1, o2) = match net.activation() {
        Activation::Sine {
            omega_first,
            omega_hidden,
        } => (omega_first, omega_hidden),
        Activation::Relu => (0.0, 0.0),
    };
    w.write_all(&[role, net.activation().tag()])?;
    w.write_all(&o1.to_le_bytes())?;
    w.write_all(&o2.to_le_bytes())?;
    put_u32(w, fourier_k as u32)?;
    put_u32(w, net.dims().len() as u32)?;
    for &d in net.dims() {
        put_u32(w, d as u32)?;
    }
    w.write_all(&(net.param_count() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(net.param_count() * 4);
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &NeuralModel<f32>) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, 2)?;
    write_net(w, 0, &model.sdf.net, 0)?;
    write_net(w, 1, &model.radiance.net, model.radiance.encoding.k_max)
}

struct RawNet {
    role: u8,
    fourier_k: usize,
    net: FieldNetwork<f32>,
}

fn read_net<Rd: Read>(r: &mut Rd) -> Result<RawNet, CheckpointError> {
    let [role, tag] = get::<2, _>(r)?;
    let o1 = f64::from_le_bytes(get(r)?);
    let o2 = f64::from_le_bytes(get(r)?);
    let fourier_k = u32::from_le_bytes(get(r)?) as usize;
    let n_dims = u32::from_le_bytes(get(r)?) as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(CheckpointError::Malformed(format!("{n_dims} layer widths")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        let d = u32::from_le_bytes(get(r)?) as usize;
        if d == 0 || d > 1 << 16 {
            return Err(CheckpointError::Malformed(format!("layer width {d}")));
        }
        dims.push(d);
    }
    let activation = match tag {
        0 => Activation::Sine {
            omega_first: o1,
            omega_hidden: o2,
        },
        1 => Activation::Relu,
        t => return Err(CheckpointError::Malformed(format!("activation tag {t}"))),
    };
    let mut net = FieldNetwork::<f32>::new(&dims, activation)?;
    let count = u64::from_le_bytes(get(r)?) as usize;
    if count != net.param_count() {
        return Err(CheckpointError::Malformed(format!(
            "{count} parameters for a network with {}",
            net.param_count()
        )));
    }
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    for (p, b) in net.params_mut().iter_mut().zip(buf.chunks_exact(4)) {
        *p = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    }
    Ok(RawNet {
        role,
        fourier_k,
        net,
    })
}

pub fn read_checkpoint<Rd: Read>(r: &mut Rd) -> Result<NeuralModel<f32>, CheckpointError> {
    if &get::<4, _>(r)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(get(r)?);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = u32::from_le_bytes(get(r)?);
    if count != 2 {
        return Err(CheckpointError::Malformed(format!("{count} networks")));
    }
    let a = read_net(r)?;
    let b = read_net(r)?;
    if a.role != 0 || b.role != 1 {
        return Err(CheckpointError::Malformed("unexpected network roles".into()));
    }
    let sdf = SdfField::from_network(a.net)?;
    let radiance = RadianceField::from_network(b.net, FourierEncoding::new(b.fourier_k))?;
    if radiance.feature_dim() != sdf.feature_dim() {
        return Err(CheckpointError::Malformed(format!(
            "radiance expects {} feature channels, sdf provides {}",
            radiance.feature_dim(),
            sdf.feature_dim()
        )));
    }
    Ok(NeuralModel { sdf, radiance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FieldConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let cfg = FieldConfig {
            hidden_width: 16,
            hidden_layers: 2,
            ..FieldConfig::default()
        };
        let model = NeuralModel::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model).unwrap();
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let model = NeuralModel::<f32>::new(&FieldConfig {
            hidden_width: 4,
            hidden_layers: 1,
            ..FieldConfig::default()
        });
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model).unwrap();
        assert!(read_checkpoint(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
    }
}
