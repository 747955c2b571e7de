//! Per-output-channel affine quantization.
//!
//! Weights are calibrated per channel with min-max ranges, stored as
//! little-endian bit streams (one byte-aligned segment per channel), and
//! dequantized on the fly by the packed kernels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{eval_primitive, lit, Primitive, Scalar, Tensor};

/// Supported weight/activation widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BitWidth(u8);

impl BitWidth {
    pub const MIN: u8 = 2;
    pub const MAX: u8 = 8;

    pub fn new(bits: u8) -> Result<Self> {
        if (Self::MIN..=Self::MAX).contains(&bits) {
            Ok(Self(bits))
        } else {
            Err(Error::Config(format!(
                "bit-width {} not supported (expected {}..={})",
                bits,
                Self::MIN,
                Self::MAX
            )))
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// Largest code, `2^bits - 1`.
    pub fn qmax(self) -> i32 {
        (1i32 << self.0) - 1
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.0
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Affine parameters of one channel (or one tensor).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub bits: BitWidth,
}

/// Min-max calibration.
///
/// The range is widened to contain zero so that every value lands within one
/// step of the grid; a constant channel gets `scale = 1, zero_point = 0`.
pub fn minmax_qparams<T: Scalar>(channel: &[T], bits: BitWidth) -> Result<QuantParams> {
    if channel.is_empty() {
        return Err(Error::Contract("cannot calibrate an empty channel".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in channel {
        let v = v.to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(Error::Data(format!("non-finite value {} in channel", v)));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        return Ok(QuantParams {
            scale: 1.0,
            zero_point: 0,
            bits,
        });
    }
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let qmax = bits.qmax();
    let scale = (hi - lo) / qmax as f64;
    let zero_point = ((-lo / scale).round() as i32).clamp(0, qmax);
    Ok(QuantParams {
        scale: scale as f32,
        zero_point,
        bits,
    })
}

#[inline]
fn unclamped_code<T: Scalar>(w: T, qp: &QuantParams) -> T {
    let s: T = lit(qp.scale as f64);
    (w / s).round() + lit(qp.zero_point as f64)
}

/// Integer code of one value.
#[inline]
pub fn quantize_value<T: Scalar>(w: T, qp: &QuantParams) -> u32 {
    let r = unclamped_code(w, qp);
    let q = r.max(T::zero()).min(lit(qp.bits.qmax() as f64));
    q.to_u32().unwrap_or(0)
}

#[inline]
pub fn dequantize_code<T: Scalar>(code: u32, qp: &QuantParams) -> T {
    let s: T = lit(qp.scale as f64);
    lit::<T>((code as i64 - qp.zero_point as i64) as f64) * s
}

/// `dequantize(clamp(round(w / scale) + zero_point))`
#[inline]
pub fn fake_quant_value<T: Scalar>(w: T, qp: &QuantParams) -> T {
    dequantize_code(quantize_value(w, qp), qp)
}

/// Whether the straight-through gradient passes for `w` (its code was not clamped).
#[inline]
pub fn in_clamp_range<T: Scalar>(w: T, qp: &QuantParams) -> bool {
    let r = unclamped_code(w, qp);
    r >= T::zero() && r <= lit(qp.bits.qmax() as f64)
}

/// Fake-quantize a whole channel with one parameter set.
pub fn fake_quant<T: Scalar>(channel: &Tensor<T>, qp: &QuantParams) -> Tensor<T> {
    channel.map(|w| fake_quant_value(w, qp))
}

/// Per-channel fake quantization of a weight tensor whose first axis is the channel axis.
pub fn fake_quant_channels<T: Scalar>(
    weight: &Tensor<T>,
    params: &[QuantParams],
) -> Result<Tensor<T>> {
    eval_primitive(
        &Primitive::FakeQuant {
            params: params.to_vec(),
        },
        &[weight],
    )
}

/// Calibrate each channel of `weight` (channel axis 0) at its own width.
pub fn calibrate_channels<T: Scalar>(
    weight: &Tensor<T>,
    bits: &[BitWidth],
) -> Result<Vec<QuantParams>> {
    let channels = weight.shape().first().copied().unwrap_or(0);
    if channels != bits.len() {
        return Err(Error::Strategy(format!(
            "{} channels but {} bit-widths",
            channels,
            bits.len()
        )));
    }
    let per = weight.len() / channels.max(1);
    weight
        .data()
        .chunks(per.max(1))
        .zip(bits)
        .map(|(c, &b)| minmax_qparams(c, b))
        .collect()
}

/// Payload bytes for `count` codes of `bits` each.
pub fn packed_len(bits: BitWidth, count: usize) -> usize {
    (bits.bits() as usize * count).div_ceil(8)
}

/// Little-endian bit packing: the first code occupies the lowest bits of byte 0.
pub fn pack(codes: &[u32], bits: BitWidth) -> Result<Vec<u8>> {
    let b = bits.bits() as usize;
    let max = bits.qmax() as u32;
    let mut out = vec![0u8; packed_len(bits, codes.len())];
    for (i, &c) in codes.iter().enumerate() {
        if c > max {
            return Err(Error::Contract(format!(
                "code {} does not fit in {} bits",
                c, bits
            )));
        }
        let mut pos = i * b;
        let mut rem = b;
        let mut v = c;
        while rem > 0 {
            let byte = pos / 8;
            let off = pos % 8;
            let take = rem.min(8 - off);
            out[byte] |= ((v & ((1 << take) - 1)) as u8) << off;
            v >>= take;
            pos += take;
            rem -= take;
        }
    }
    Ok(out)
}

pub fn unpack(payload: &[u8], bits: BitWidth, count: usize) -> Result<Vec<u32>> {
    let expected = packed_len(bits, count);
    if payload.len() != expected {
        return Err(Error::Codec(format!(
            "payload has {} bytes, {} codes at {} bits need {}",
            payload.len(),
            count,
            bits,
            expected
        )));
    }
    let b = bits.bits() as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut pos = i * b;
        let mut rem = b;
        let mut v = 0u32;
        let mut shift = 0;
        while rem > 0 {
            let byte = pos / 8;
            let off = pos % 8;
            let take = rem.min(8 - off);
            let chunk = (payload[byte] >> off) as u32 & ((1 << take) - 1);
            v |= chunk << shift;
            shift += take;
            pos += take;
            rem -= take;
        }
        out.push(v);
    }
    Ok(out)
}

const PACKED_MAGIC: &[u8; 4] = b"CHQW";
const PACKED_VERSION: u8 = 1;

/// A weight tensor stored as per-channel bit-packed codes.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedTensor {
    channel_bits: Vec<BitWidth>,
    params: Vec<QuantParams>,
    elements_per_channel: usize,
    payload: Vec<u8>,
    offsets: Vec<usize>,
}

impl PackedTensor {
    /// Calibrate and pack a weight whose first axis is the output channel.
    pub fn quantize<T: Scalar>(weight: &Tensor<T>, bits: &[BitWidth]) -> Result<Self> {
        let params = calibrate_channels(weight, bits)?;
        let per = weight.len() / bits.len().max(1);
        let mut payload = Vec::new();
        let mut offsets = Vec::with_capacity(bits.len() + 1);
        for (chunk, qp) in weight.data().chunks(per.max(1)).zip(&params) {
            offsets.push(payload.len());
            let codes: Vec<u32> = chunk.iter().map(|&w| quantize_value(w, qp)).collect();
            payload.extend(pack(&codes, qp.bits)?);
        }
        offsets.push(payload.len());
        Ok(Self {
            channel_bits: bits.to_vec(),
            params,
            elements_per_channel: per,
            payload,
            offsets,
        })
    }

    pub fn channels(&self) -> usize {
        self.channel_bits.len()
    }

    pub fn elements_per_channel(&self) -> usize {
        self.elements_per_channel
    }

    pub fn channel_bits(&self) -> &[BitWidth] {
        &self.channel_bits
    }

    pub fn params(&self) -> &[QuantParams] {
        &self.params
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn channel_codes(&self, c: usize) -> Result<Vec<u32>> {
        unpack(
            &self.payload[self.offsets[c]..self.offsets[c + 1]],
            self.channel_bits[c],
            self.elements_per_channel,
        )
    }

    pub fn dequantize_channel<T: Scalar>(&self, c: usize, out: &mut [T]) -> Result<()> {
        let codes = self.channel_codes(c)?;
        for (o, code) in out.iter_mut().zip(codes) {
            *o = dequantize_code(code, &self.params[c]);
        }
        Ok(())
    }

    /// Materialize as `[channels, elements_per_channel]`.
    pub fn dequantize<T: Scalar>(&self) -> Result<Tensor<T>> {
        let per = self.elements_per_channel;
        let mut data = vec![T::zero(); self.channels() * per];
        for c in 0..self.channels() {
            self.dequantize_channel(c, &mut data[c * per..(c + 1) * per])?;
        }
        Tensor::new(vec![self.channels(), per], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.channels() * 9 + self.payload.len());
        out.extend_from_slice(PACKED_MAGIC);
        out.push(PACKED_VERSION);
        out.extend_from_slice(&(self.channels() as u32).to_le_bytes());
        out.extend_from_slice(&(self.elements_per_channel as u32).to_le_bytes());
        out.extend(self.channel_bits.iter().map(|b| b.bits()));
        for qp in &self.params {
            out.extend_from_slice(&qp.scale.to_le_bytes());
            out.extend_from_slice(&qp.zero_point.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::wire::Reader::new(bytes);
        if r.take(4)? != PACKED_MAGIC {
            return Err(Error::Codec("bad packed-tensor magic".into()));
        }
        let version = r.u8()?;
        if version != PACKED_VERSION {
            return Err(Error::Codec(format!("unsupported version {}", version)));
        }
        let channels = r.u32()? as usize;
        let per = r.u32()? as usize;
        let channel_bits = r
            .take(channels)?
            .iter()
            .map(|&b| BitWidth::new(b).map_err(|e| Error::Codec(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut params = Vec::with_capacity(channels);
        for &bits in &channel_bits {
            let scale = r.f32()?;
            let zero_point = r.i32()?;
            params.push(QuantParams {
                scale,
                zero_point,
                bits,
            });
        }
        let mut offsets = Vec::with_capacity(channels + 1);
        let mut total = 0;
        for &b in &channel_bits {
            offsets.push(total);
            total += packed_len(b, per);
        }
        offsets.push(total);
        let payload = r.take(total)?.to_vec();
        r.finish()?;
        Ok(Self {
            channel_bits,
            params,
            elements_per_channel: per,
            payload,
            offsets,
        })
    }
}

/// Per-tensor dynamic min-max fake quantization of activations.
pub fn fake_quant_activations<T: Scalar>(x: &Tensor<T>, bits: BitWidth) -> Result<Tensor<T>> {
    let qp = minmax_qparams(x.data(), bits)?;
    Ok(fake_quant(x, &qp))
}

/// `input [n, in] * dequant(packed)^T + bias`, dequantizing each channel on the fly.
pub fn quantized_linear_forward<T: Scalar>(
    packed: &PackedTensor,
    input: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    act_quant: Option<BitWidth>,
) -> Result<Tensor<T>> {
    let [n, d_in] = input.shape() else {
        return Err(crate::error::shape_err(
            "quantized-linear",
            format!("expected matrix input, got {:?}", input.shape()),
        ));
    };
    let (n, d_in) = (*n, *d_in);
    if d_in != packed.elements_per_channel() {
        return Err(Error::Strategy(format!(
            "input width {} does not match {} elements per channel",
            d_in,
            packed.elements_per_channel()
        )));
    }
    let d_out = packed.channels();
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(Error::Strategy(format!(
                "bias has {} entries for {} channels",
                b.len(),
                d_out
            )));
        }
    }
    let xq;
    let x = match act_quant {
        Some(bits) => {
            xq = fake_quant_activations(input, bits)?;
            &xq
        }
        None => input,
    };
    let mut out = vec![T::zero(); n * d_out];
    let mut row = vec![T::zero(); d_in];
    for c in 0..d_out {
        packed.dequantize_channel(c, &mut row)?;
        let b = bias.map_or(T::zero(), |b| b.data()[c]);
        for i in 0..n {
            let xr = x.row(i);
            let mut acc = T::zero();
            for (&xv, &wv) in xr.iter().zip(&row) {
                if xv == T::zero() {
                    continue;
                }
                acc = acc + xv * wv;
            }
            out[i * d_out + c] = acc + b;
        }
    }
    Tensor::new(vec![n, d_out], out)
}

/// Valid conv over `[n, h, w]` inputs with packed `[c, kh, kw]` filters.
pub fn quantized_conv_forward<T: Scalar>(
    packed: &PackedTensor,
    kernel: (usize, usize),
    input: &Tensor<T>,
    act_quant: Option<BitWidth>,
) -> Result<Tensor<T>> {
    if kernel.0 * kernel.1 != packed.elements_per_channel() {
        return Err(Error::Strategy(format!(
            "kernel {}x{} does not match {} elements per channel",
            kernel.0,
            kernel.1,
            packed.elements_per_channel()
        )));
    }
    let w = packed
        .dequantize::<T>()?
        .reshape(&[packed.channels(), kernel.0, kernel.1])?;
    let xq;
    let x = match act_quant {
        Some(bits) => {
            xq = fake_quant_activations(input, bits)?;
            &xq
        }
        None => input,
    };
    eval_primitive(&Primitive::Conv2d, &[x, &w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tape};

    fn bw(b: u8) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    #[test]
    fn only_listed_widths_construct() {
        assert!(BitWidth::new(1).is_err());
        assert!(BitWidth::new(9).is_err());
        for b in 2..=8 {
            assert_eq!(BitWidth::new(b).unwrap().bits(), b);
        }
    }

    #[test]
    fn minmax_two_bit_example() {
        let qp = minmax_qparams(&[-1.0f64, -0.5, 0.0, 0.5, 1.0], bw(2)).unwrap();
        assert!((qp.scale as f64 - 2.0 / 3.0).abs() < 1e-7);
        assert_eq!(qp.zero_point, 2);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        for b in 2..=8 {
            let qp = minmax_qparams(&[3.0f32, 3.0], bw(b)).unwrap();
            assert_eq!((qp.scale, qp.zero_point), (1.0, 0));
        }
    }

    #[test]
    fn nan_is_a_data_error() {
        assert!(matches!(
            minmax_qparams(&[0.0f32, f32::NAN], bw(4)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn eight_bit_grid_round_trips_exactly() {
        let grid: Vec<f64> = (0..=255).map(|i| i as f64 / 255.0).collect();
        let qp = minmax_qparams(&grid, bw(8)).unwrap();
        for &v in &grid {
            let back: f64 = fake_quant_value(v, &qp);
            assert!((back - v).abs() < 1e-7, "{} -> {}", v, back);
        }
    }

    #[test]
    fn fake_quant_example_value() {
        let qp = QuantParams {
            scale: 2.0 / 3.0,
            zero_point: 2,
            bits: bw(2),
        };
        assert_eq!(quantize_value(0.5f64, &qp), 3);
        let v: f64 = fake_quant_value(0.5, &qp);
        assert!((v - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn on_grid_values_are_fixed_points() {
        let qp = QuantParams {
            scale: 0.25,
            zero_point: 4,
            bits: bw(4),
        };
        for k in -4..=11 {
            let w = k as f64 * 0.25;
            assert_eq!(fake_quant_value(w, &qp), w);
        }
    }

    #[test]
    fn ste_gradient_is_identity_in_range() {
        let x = Tensor::vector(vec![-0.9, -0.2, 0.0, 0.3, 0.99]);
        let qp = minmax_qparams(x.data(), bw(3)).unwrap();
        let tape = Tape::<f64>::new();
        let v = tape.leaf(x.clone(), true);
        let q = tape.fake_quant(&v, vec![qp]).unwrap();
        let loss = tape.sum(&q, None).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[1.0; 5]);
        // far outside the calibrated range the code clamps and the gradient stops
        let tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::vector(vec![50.0]), true);
        let q = tape.fake_quant(&v, vec![qp]).unwrap();
        let loss = tape.sum(&q, None).unwrap();
        assert_eq!(tape.backward(loss).unwrap().grad(v).unwrap().data(), &[0.0]);
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack(&[0, 1, 2, 3], bw(2)).unwrap().len(), 1);
        assert_eq!(pack(&[1, 2, 3], bw(2)).unwrap(), vec![0x39]);
        assert_eq!(pack(&[0; 100], bw(6)).unwrap().len(), 75);
        assert!(matches!(pack(&[4], bw(2)), Err(Error::Contract(_))));
    }

    #[test]
    fn unpack_examples() {
        assert_eq!(unpack(&[0x39], bw(2), 3).unwrap(), vec![1, 2, 3]);
        assert!(unpack(&[], bw(5), 0).unwrap().is_empty());
        assert!(matches!(unpack(&[0, 0], bw(2), 3), Err(Error::Codec(_))));
    }

    #[test]
    fn mixed_width_linear_matches_fake_quant_reference() {
        let w = Tensor::from_f64(
            &[3, 4],
            &[
                0.3, -0.7, 0.1, 0.9, -0.4, 0.2, 0.8, -0.6, 0.05, -0.15, 0.45, -0.95,
            ],
        )
        .unwrap();
        let bits = [bw(8), bw(4), bw(2)];
        let packed = PackedTensor::quantize(&w, &bits).unwrap();
        let params = calibrate_channels(&w, &bits).unwrap();
        let wq = fake_quant_channels(&w, &params).unwrap();
        let x = Tensor::from_f64(&[2, 4], &[1.0, -2.0, 0.5, 0.25, 0.0, 1.5, -1.0, 2.0]).unwrap();
        let b = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let got = quantized_linear_forward(&packed, &x, Some(&b), None).unwrap();
        let e = crate::tensor::Eager::<f64>::new();
        let reference = e
            .linear(&e.constant(x), &e.constant(wq), Some(&e.constant(b)))
            .unwrap();
        assert!(got.max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn wrong_input_width_is_a_strategy_error() {
        let w = Tensor::<f32>::zeros(&[2, 3]);
        let packed = PackedTensor::quantize(&w, &[bw(4), bw(4)]).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 4]);
        assert!(matches!(
            quantized_linear_forward(&packed, &x, None, None),
            Err(Error::Strategy(_))
        ));
        assert!(matches!(
            PackedTensor::quantize(&w, &[bw(4)]),
            Err(Error::Strategy(_))
        ));
    }

    #[test]
    fn packed_serialization_round_trips() {
        let w = Tensor::<f32>::from_fn(&[3, 5], |i| (i as f32 * 0.37).sin());
        let p = PackedTensor::quantize(&w, &[bw(2), bw(5), bw(8)]).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"CHQW");
        assert_eq!(PackedTensor::from_bytes(&bytes).unwrap(), p);
        assert!(PackedTensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
