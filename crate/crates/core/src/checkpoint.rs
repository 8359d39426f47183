//! Binary model checkpoints. Little-endian, f32 weight payload, optional
//! mask table. Files from the wrong endianness or a newer version are
//! refused rather than misread.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bench::write_atomic;
use crate::error::{Error, Result};
use crate::masking::{Mask, MaskTable, Provenance};
use crate::net::{Layer, PartitionedNetwork};

pub const MAGIC: &[u8; 4] = b"RMCK";
pub const VERSION: u32 = 1;
/// Written little-endian; reads back byte-swapped on a big-endian producer.
const ENDIAN_MARK: u32 = 0x0102_0304;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: PartitionedNetwork,
    pub masks: Option<MaskTable>,
    pub master_seed: u64,
}

pub fn save_checkpoint(
    path: &Path,
    net: &PartitionedNetwork,
    masks: Option<&MaskTable>,
    master_seed: u64,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, ENDIAN_MARK);
    buf.extend_from_slice(&master_seed.to_le_bytes());
    put_u32(&mut buf, net.input_dim as u32);
    put_u32(&mut buf, net.num_classes as u32);
    buf.extend_from_slice(&net.capacity_fraction.to_le_bytes());
    put_u32(&mut buf, net.layers.len() as u32);
    for l in &net.layers {
        put_u32(&mut buf, l.in_dim as u32);
        put_u32(&mut buf, l.out_dim as u32);
        put_u32(&mut buf, l.gen_out as u32);
        put_u32(&mut buf, l.in_gen as u32);
    }
    for l in &net.layers {
        for &v in l.w.iter().chain(l.b.iter()) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    match masks {
        None => buf.push(0),
        Some(t) => {
            buf.push(1);
            buf.extend_from_slice(&t.density.to_le_bytes());
            buf.push(match t.provenance {
                Provenance::Etd => 0,
                Provenance::Rem => 1,
                Provenance::Ideal => 2,
            });
            let shape = t.mem_shape();
            put_u32(&mut buf, shape.len() as u32);
            for &s in &shape {
                put_u32(&mut buf, s as u32);
            }
            buf.extend_from_slice(&(t.entries.len() as u64).to_le_bytes());
            for (&id, mask) in &t.entries {
                buf.extend_from_slice(&id.to_le_bytes());
                for layer in &mask.layers {
                    buf.extend_from_slice(layer);
                }
            }
        }
    }
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(r.bad("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.bad(&format!("unsupported version {version} (expected {VERSION})")));
    }
    let mark = r.u32()?;
    if mark != ENDIAN_MARK {
        if mark.swap_bytes() == ENDIAN_MARK {
            return Err(r.bad("checkpoint written with opposite endianness"));
        }
        return Err(r.bad("bad endianness marker"));
    }
    let master_seed = r.u64()?;
    let input_dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let capacity_fraction = r.f64()?;
    let n_layers = r.u32()? as usize;
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let gen_out = r.u32()? as usize;
        let in_gen = r.u32()? as usize;
        if gen_out > out_dim || in_gen > in_dim {
            return Err(r.bad("layer partition exceeds layer size"));
        }
        dims.push((in_dim, out_dim, gen_out, in_gen));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for &(in_dim, out_dim, gen_out, in_gen) in &dims {
        let mut w = Vec::with_capacity(in_dim * out_dim);
        for _ in 0..in_dim * out_dim {
            w.push(r.f32()? as f64);
        }
        let mut b = Vec::with_capacity(out_dim);
        for _ in 0..out_dim {
            b.push(r.f32()? as f64);
        }
        layers.push(Layer {
            w,
            b,
            in_dim,
            out_dim,
            gen_out,
            in_gen,
        });
    }
    let net = PartitionedNetwork {
        layers,
        input_dim,
        num_classes,
        capacity_fraction,
    };
    let masks = match r.u8()? {
        0 => None,
        1 => {
            let density = r.f64()?;
            let provenance = match r.u8()? {
                0 => Provenance::Etd,
                1 => Provenance::Rem,
                2 => Provenance::Ideal,
                other => return Err(r.bad(&format!("unknown mask provenance {other}"))),
            };
            let n_shape = r.u32()? as usize;
            let mut shape = Vec::with_capacity(n_shape);
            for _ in 0..n_shape {
                shape.push(r.u32()? as usize);
            }
            let n_entries = r.u64()? as usize;
            let mut entries = BTreeMap::new();
            for _ in 0..n_entries {
                let id = r.u64()?;
                let mut mask_layers = Vec::with_capacity(shape.len());
                for &s in &shape {
                    let bytes = r.bytes(s)?;
                    if bytes.iter().any(|&b| b > 1) {
                        return Err(r.bad("mask bytes must be 0 or 1"));
                    }
                    mask_layers.push(bytes.to_vec());
                }
                entries.insert(id, Mask { layers: mask_layers });
            }
            Some(MaskTable {
                density,
                provenance,
                entries,
            })
        }
        other => return Err(r.bad(&format!("bad mask-table flag {other}"))),
    };
    if r.pos != buf.len() {
        return Err(r.bad(&format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint {
        net,
        masks,
        master_seed,
    })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bad(&self, msg: &str) -> Error {
        Error::BadFormat {
            offset: self.pos as u64,
            msg: msg.to_string(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad("truncated checkpoint"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}
