//! Dense f32 feature maps and the handful of layers the network needs.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Channel-major feature map, each channel laid out x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Feat {
    pub channels: usize,
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Feat {
    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        Self {
            channels,
            shape,
            data: vec![0.0; channels * shape.iter().product::<usize>()],
        }
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn relu(mut self) -> Self {
        for v in &mut self.data {
            *v = v.max(0.0);
        }
        self
    }

    pub fn concat(parts: &[&Feat]) -> Feat {
        let shape = parts[0].shape;
        assert!(parts.iter().all(|p| p.shape == shape), "concat shape mismatch");
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Feat {
            channels: parts.iter().map(|p| p.channels).sum(),
            shape,
            data,
        }
    }

    /// Max pooling with window = stride = `factor`.
    pub fn max_pool(&self, factor: [usize; 3]) -> Feat {
        let [nx, ny, nz] = self.shape;
        let shape = [nx / factor[0], ny / factor[1], nz / factor[2]];
        let mut out = Feat::zeros(self.channels, shape);
        let m = out.voxels();
        out.data.par_chunks_mut(m).enumerate().for_each(|(c, dst)| {
            let src = self.channel(c);
            for z in 0..shape[2] {
                for y in 0..shape[1] {
                    for x in 0..shape[0] {
                        let mut best = f32::NEG_INFINITY;
                        for dz in 0..factor[2] {
                            for dy in 0..factor[1] {
                                for dx in 0..factor[0] {
                                    let (sx, sy, sz) = (x * factor[0] + dx, y * factor[1] + dy, z * factor[2] + dz);
                                    best = best.max(src[sx + nx * (sy + ny * sz)]);
                                }
                            }
                        }
                        dst[x + shape[0] * (y + shape[1] * z)] = best;
                    }
                }
            }
        });
        out
    }

    /// Separable linear resampling to `target` with half-pixel centres
    /// (sample `(i + 0.5) * n_in / n_out - 0.5`, clamped at the borders).
    pub fn resize(&self, target: [usize; 3]) -> Feat {
        let mut cur = self.clone();
        for axis in 0..3 {
            if cur.shape[axis] != target[axis] {
                cur = cur.resize_axis(axis, target[axis]);
            }
        }
        cur
    }

    fn resize_axis(&self, axis: usize, n_out: usize) -> Feat {
        let n_in = self.shape[axis];
        let mut shape = self.shape;
        shape[axis] = n_out;
        let taps: Vec<(usize, usize, f32)> = (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect();
        let [ix, iy, _] = self.shape;
        let [ox, oy, oz] = shape;
        let mut out = Feat::zeros(self.channels, shape);
        let m = out.voxels();
        out.data.par_chunks_mut(m).enumerate().for_each(|(c, dst)| {
            let src = self.channel(c);
            let at = |x: usize, y: usize, z: usize| src[x + ix * (y + iy * z)];
            for z in 0..oz {
                for y in 0..oy {
                    for x in 0..ox {
                        let mut p = [x, y, z];
                        let (i0, i1, w) = taps[p[axis]];
                        p[axis] = i0;
                        let a = at(p[0], p[1], p[2]);
                        p[axis] = i1;
                        let b = at(p[0], p[1], p[2]);
                        dst[x + ox * (y + oy * z)] = a + w * (b - a);
                    }
                }
            }
        });
        out
    }

    /// Spatial mean per channel.
    pub fn global_avg_pool(&self) -> Vec<f32> {
        let n = self.voxels() as f64;
        (0..self.channels)
            .map(|c| (self.channel(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
            .collect()
    }
}

/// Stride-1 convolution with zero "same" padding. Kernel extents are odd;
/// weights are stored `[out][in][kz][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub dilation: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: [usize; 3], dilation: usize) -> Self {
        let taps: usize = kernel.iter().product();
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight: vec![0.0; out_channels * in_channels * taps],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn pointwise(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self::new(name, in_channels, out_channels, [1, 1, 1], 1)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `[out, in, kz, ky, kx]`
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel[2], self.kernel[1], self.kernel[0]]
    }

    pub fn init_normal(&mut self, rng: &mut impl Rng, dist: &Normal<f32>) {
        for w in &mut self.weight {
            *w = dist.sample(rng);
        }
        self.bias.fill(0.0);
    }

    pub fn forward(&self, x: &Feat) -> Feat {
        assert_eq!(x.channels, self.in_channels, "{}: input channels", self.name);
        let [nx, ny, nz] = x.shape;
        let mut out = Feat::zeros(self.out_channels, x.shape);
        let n = out.voxels();
        let [kx, ky, kz] = self.kernel;
        let taps = kx * ky * kz;
        let d = self.dilation as isize;
        // Valid destination range along one axis for a tap offset.
        let range = |off: isize, len: usize| -> (usize, usize) {
            let lo = (-off).max(0) as usize;
            let hi = (len as isize - off.max(0)).max(0) as usize;
            (lo.min(len), hi)
        };
        out.data.par_chunks_mut(n).enumerate().for_each(|(o, dst)| {
            dst.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = x.channel(i);
                let wbase = (o * self.in_channels + i) * taps;
                for tz in 0..kz {
                    let oz = (tz as isize - (kz / 2) as isize) * d;
                    let (z0, z1) = range(oz, nz);
                    for ty in 0..ky {
                        let oy = (ty as isize - (ky / 2) as isize) * d;
                        let (y0, y1) = range(oy, ny);
                        for tx in 0..kx {
                            let ox = (tx as isize - (kx / 2) as isize) * d;
                            let (x0, x1) = range(ox, nx);
                            let w = self.weight[wbase + (tz * ky + ty) * kx + tx];
                            if w == 0.0 || x0 >= x1 {
                                continue;
                            }
                            for z in z0..z1 {
                                let sz = (z as isize + oz) as usize;
                                for y in y0..y1 {
                                    let sy = (y as isize + oy) as usize;
                                    let drow = &mut dst[nx * (y + ny * z) + x0..nx * (y + ny * z) + x1];
                                    let s0 = (nx * (sy + ny * sz)) as isize + x0 as isize + ox;
                                    let srow = &src[s0 as usize..s0 as usize + (x1 - x0)];
                                    for (a, &b) in drow.iter_mut().zip(srow) {
                                        *a += w * b;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        out
    }
}

/// Residual channel attention: `x + x * sigmoid(W2 relu(W1 gap(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rcab {
    pub squeeze: Conv,
    pub excite: Conv,
}

impl Rcab {
    pub fn new(name: &str, channels: usize) -> Self {
        let hidden = (channels / 4).max(1);
        Self {
            squeeze: Conv::pointwise(format!("{name}.squeeze"), channels, hidden),
            excite: Conv::pointwise(format!("{name}.excite"), hidden, channels),
        }
    }

    /// Applies the block and returns the channel gates alongside.
    pub fn forward(&self, x: &Feat) -> (Feat, Vec<f64>) {
        let pooled = Feat {
            channels: x.channels,
            shape: [1, 1, 1],
            data: x.global_avg_pool(),
        };
        let h = self.squeeze.forward(&pooled).relu();
        let g: Vec<f64> = self.excite.forward(&h).data.iter().map(|&v| sigmoid(v as f64)).collect();
        let mut out = x.clone();
        let n = x.voxels();
        for (c, &gc) in g.iter().enumerate() {
            let gc = gc as f32;
            for v in &mut out.data[c * n..(c + 1) * n] {
                *v += *v * gc;
            }
        }
        (out, g)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
