//! Head-layer dissection: one contribution map per convolution kernel,
//! pixel-shuffle aware rearrangement, ranking and motion analysis.

use ndarray::{s, Array2, Array3, ArrayD, ArrayView3, Axis};

use crate::components::{FinalActivation, NervModel};
use crate::error::{config_err, shape_err, Result};
use crate::hypernerv::HyperNerv;
use crate::scalar::Scalar;

/// Per-kernel contribution maps of one head layer at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionMaps {
    /// `(num_kernels, H, W)`.
    pub maps: Array3<f64>,
    /// `(c_in, c_out)` of each kernel; `c_out` indexes conv output channels.
    pub kernel_index: Vec<(usize, usize)>,
    /// Bias of each conv output channel, kept out of the maps.
    pub bias: Vec<f64>,
    pub timestep: f64,
    /// Pixel-shuffle stride that follows the conv (`[1, 1]` for plain heads).
    pub stride: [usize; 2],
    /// True once the maps have been scattered to output resolution.
    pub shuffled: bool,
}

/// Convolves every `(c_in, c_out)` kernel of `weight` `(Cout, k, k, Cin)`
/// separately over `input` `(H, W, Cin)` with zero "same" padding.
pub fn conv_contributions(
    input: ArrayView3<'_, f64>,
    weight: &ArrayD<f64>,
    bias: &[f64],
    timestep: f64,
    stride: [usize; 2],
) -> Result<ContributionMaps> {
    let (h, w, cin) = input.dim();
    let ws = weight.shape();
    if ws.len() != 4 || ws[3] != cin || ws[1] != ws[2] || ws[1] % 2 == 0 {
        return shape_err(format!("head weight {ws:?} does not fit input channels {cin}"));
    }
    let (cout, k) = (ws[0], ws[1]);
    if bias.len() != cout {
        return shape_err(format!("{} biases for {cout} output channels", bias.len()));
    }
    let p = (k / 2) as isize;
    let mut maps = Array3::<f64>::zeros((cout * cin, h, w));
    let mut kernel_index = Vec::with_capacity(cout * cin);
    for co in 0..cout {
        for ci in 0..cin {
            let idx = kernel_index.len();
            kernel_index.push((ci, co));
            let mut m = maps.index_axis_mut(Axis(0), idx);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = x as isize + kx as isize - p;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += weight[[co, ky, kx, ci]] * input[[sy as usize, sx as usize, ci]];
                        }
                    }
                    m[[y, x]] = acc;
                }
            }
        }
    }
    Ok(ContributionMaps { maps, kernel_index, bias: bias.to_vec(), timestep, stride, shuffled: false })
}

fn to_f64<T: Scalar>(a: &ArrayD<T>) -> ArrayD<f64> {
    a.mapv(|v| v.f64())
}

/// Contribution maps of a NeRV-family conv head for frame time `t`.
pub fn head_contributions<T: Scalar>(model: &NervModel<T>, t: f64) -> Result<ContributionMaps> {
    let mut g = crate::autodiff::Graph::new();
    let bound = model.params().bind_const(&mut g);
    let vars = model.forward_graph(&mut g, &bound, &[t])?;
    let input = to_f64(g.value(vars.head_input));
    let input = input.index_axis(Axis(0), 0).into_dimensionality::<ndarray::Ix3>().expect("NHWC head input");
    let weight = to_f64(model.params().get(model.head().weight()));
    let bias: Vec<f64> = model.params().get(model.head().bias()).iter().map(|v| v.f64()).collect();
    conv_contributions(input, &weight, &bias, t, [1, 1])
}

/// Contribution maps of the conv + pixel-shuffle head of a hypo-network
/// rendered from stored tokens, for clip frame `frame`.
pub fn hypo_head_contributions<T: Scalar>(
    net: &HyperNerv<T>,
    tokens: &[Option<ArrayD<T>>],
    masked: bool,
    frame: usize,
) -> Result<ContributionMaps> {
    let frames = net.layout().clip_frames;
    if frame >= frames {
        return config_err(format!("frame {frame} outside a {frames}-frame clip"));
    }
    let (input, weight, bias) = net.render_vars(tokens, masked, |g, v| {
        (to_f64(g.value(v.head_input)), to_f64(g.value(v.head_weight)), to_f64(g.value(v.head_bias)))
    })?;
    let input = input.index_axis(Axis(0), frame).into_dimensionality::<ndarray::Ix3>().expect("NHWC head input");
    let stride = net.layout().layers.last().expect("non-empty layout").upscale;
    let t = crate::video::normalized_time(frame, frames);
    conv_contributions(input, &weight, &bias.iter().copied().collect::<Vec<_>>(), t, stride)
}

impl ContributionMaps {
    pub fn num_kernels(&self) -> usize {
        self.maps.shape()[0]
    }

    /// `(H, W)` of the maps.
    pub fn resolution(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }

    fn group_size(&self) -> usize {
        self.stride[0] * self.stride[1]
    }

    /// Channel of the reported output a kernel feeds: the conv channel for
    /// unshuffled maps, the shuffled image channel otherwise.
    pub fn output_channel(&self, kernel: usize) -> usize {
        let co = self.kernel_index[kernel].1;
        if self.shuffled {
            co / self.group_size()
        } else {
            co
        }
    }

    /// Position `(i, j)` inside each `stride` window that a kernel owns.
    pub fn lattice_slot(&self, kernel: usize) -> (usize, usize) {
        let r = self.kernel_index[kernel].1 % self.group_size();
        (r / self.stride[1], r % self.stride[1])
    }

    pub fn num_output_channels(&self) -> usize {
        if self.shuffled {
            self.bias.len() / self.group_size()
        } else {
            self.bias.len()
        }
    }

    /// Bias broadcast to `(H, W, C)` in the current layout.
    fn bias_map(&self) -> Array3<f64> {
        let (h, w) = self.resolution();
        let [sh, sw] = self.stride;
        let c = self.num_output_channels();
        Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            if self.shuffled {
                self.bias[ch * sh * sw + (y % sh) * sw + x % sw]
            } else {
                self.bias[ch]
            }
        })
    }

    /// Sum of the maps per output channel plus bias: `(H, W, C)`, equal to the
    /// head output before its final activation.
    pub fn channel_sum(&self) -> Array3<f64> {
        let mut out = self.bias_map();
        for k in 0..self.num_kernels() {
            let c = self.output_channel(k);
            let mut lane = out.slice_mut(s![.., .., c]);
            lane += &self.maps.index_axis(Axis(0), k);
        }
        out
    }

    /// [`channel_sum`](Self::channel_sum) passed through the final activation.
    pub fn activated(&self, act: FinalActivation) -> Array3<f64> {
        self.channel_sum().mapv(|v| act.apply(v))
    }

    /// Sum of all maps: `(H, W)`.
    pub fn total(&self) -> Array2<f64> {
        self.maps.sum_axis(Axis(0))
    }

    /// `sum |map|` per kernel.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.maps.outer_iter().map(|m| m.iter().map(|v| v.abs()).sum()).collect()
    }
}

/// Scatters each kernel's map onto its pixel-shuffle lattice at output
/// resolution; positions the kernel does not own are zero.
pub fn shuffle_contributions(maps: &ContributionMaps) -> ContributionMaps {
    if maps.shuffled || maps.group_size() == 1 {
        return ContributionMaps { shuffled: true, ..maps.clone() };
    }
    let [sh, sw] = maps.stride;
    let (h, w) = maps.resolution();
    let mut out = Array3::<f64>::zeros((maps.num_kernels(), h * sh, w * sw));
    for k in 0..maps.num_kernels() {
        let (i, j) = maps.lattice_slot(k);
        let src = maps.maps.index_axis(Axis(0), k);
        let mut dst = out.index_axis_mut(Axis(0), k);
        for y in 0..h {
            for x in 0..w {
                dst[[y * sh + i, x * sw + j]] = src[[y, x]];
            }
        }
    }
    ContributionMaps { maps: out, shuffled: true, ..maps.clone() }
}

/// Kernel indices by descending `sum |map|`; ties keep kernel order.
pub fn sort_by_magnitude(maps: &ContributionMaps) -> Vec<usize> {
    let mags = maps.magnitudes();
    let mut order: Vec<usize> = (0..mags.len()).collect();
    order.sort_by(|&a, &b| mags[b].total_cmp(&mags[a]));
    order
}

/// `|total(next) - total(current)|` per pixel.
pub fn motion_fluctuation(current: &ContributionMaps, next: &ContributionMaps) -> Result<Array2<f64>> {
    if current.resolution() != next.resolution() {
        return shape_err(format!("maps at {:?} and {:?} differ in resolution", current.resolution(), next.resolution()));
    }
    Ok((next.total() - current.total()).mapv(f64::abs))
}

/// Places per-patch maps at their `(y, x)` offsets inside a `size` frame.
pub fn stitch_patches(patches: &[((usize, usize), ContributionMaps)], size: (usize, usize)) -> Result<ContributionMaps> {
    let Some((_, first)) = patches.first() else {
        return shape_err("no patches to stitch");
    };
    let mut maps = Array3::<f64>::zeros((first.num_kernels(), size.0, size.1));
    for ((oy, ox), p) in patches {
        if p.kernel_index != first.kernel_index || p.bias != first.bias || p.shuffled != first.shuffled {
            return shape_err("patches come from different heads");
        }
        let (h, w) = p.resolution();
        if oy + h > size.0 || ox + w > size.1 {
            return shape_err(format!("patch at ({oy}, {ox}) of {h}x{w} exceeds frame {size:?}"));
        }
        maps.slice_mut(s![.., *oy..oy + h, *ox..ox + w]).assign(&p.maps);
    }
    Ok(ContributionMaps { maps, ..first.clone() })
}

/// Diverging red-white-blue colour for `v` scaled by `max_abs`: negative is
/// red, positive blue.
pub fn diverging_rgb(v: f64, max_abs: f64) -> [u8; 3] {
    let a = if max_abs > 0.0 { (v / max_abs).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if a < 0.0 {
        [255, fade(-a), fade(-a)]
    } else {
        [fade(a), fade(a), 255]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn identity_and_zero_heads() {
        let input = Array3::from_shape_fn((3, 4, 1), |(y, x, _)| (y * 4 + x) as f64);
        let w = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0);
        let m = conv_contributions(input.view(), &w, &[0.0], 0.0, [1, 1]).unwrap();
        assert_eq!(m.maps.index_axis(Axis(0), 0), input.index_axis(Axis(2), 0));
        let z = conv_contributions(input.view(), &ArrayD::zeros(IxDyn(&[2, 3, 3, 1])), &[0.5, -1.0], 0.0, [1, 1]).unwrap();
        assert!(z.maps.iter().all(|&v| v == 0.0));
        assert!(z.channel_sum().slice(s![.., .., 1]).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn lattice_and_mass() {
        let input = Array3::from_shape_fn((2, 3, 2), |(y, x, c)| 1.0 + (y + x + c) as f64);
        let w = ArrayD::from_shape_fn(IxDyn(&[4, 1, 1, 2]), |i| 1.0 + i[0] as f64 + i[3] as f64);
        let m = conv_contributions(input.view(), &w, &[0.0; 4], 0.0, [2, 2]).unwrap();
        let sm = shuffle_contributions(&m);
        assert_eq!(sm.resolution(), (4, 6));
        for k in 0..sm.num_kernels() {
            let (i, j) = sm.lattice_slot(k);
            for ((y, x), &v) in sm.maps.index_axis(Axis(0), k).indexed_iter() {
                assert_eq!(v != 0.0, y % 2 == i && x % 2 == j);
            }
        }
        assert!((sm.maps.sum() - m.maps.sum()).abs() < 1e-12);
        let one = conv_contributions(input.view(), &w, &[0.0; 4], 0.0, [1, 1]).unwrap();
        assert_eq!(shuffle_contributions(&one).maps, one.maps);
    }

    #[test]
    fn ranking_is_stable() {
        let mut m = conv_contributions(Array3::zeros((2, 2, 3)).view(), &ArrayD::zeros(IxDyn(&[1, 1, 1, 3])), &[0.0], 0.0, [1, 1])
            .unwrap();
        assert_eq!(sort_by_magnitude(&m), vec![0, 1, 2]);
        m.maps[[2, 0, 0]] = -5.0;
        m.maps[[0, 1, 1]] = 1.0;
        m.maps[[1, 1, 1]] = -1.0;
        assert_eq!(sort_by_magnitude(&m), vec![2, 0, 1]);
    }

    #[test]
    fn fluctuation_is_local() {
        let a = conv_contributions(Array3::zeros((4, 4, 1)).view(), &ArrayD::zeros(IxDyn(&[1, 1, 1, 1])), &[0.0], 0.0, [1, 1])
            .unwrap();
        assert!(motion_fluctuation(&a, &a).unwrap().iter().all(|&v| v == 0.0));
        let mut b = a.clone();
        b.maps[[0, 1, 2]] = 3.0;
        let f = motion_fluctuation(&a, &b).unwrap();
        assert_eq!(f.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(f[[1, 2]], 3.0);
    }

    #[test]
    fn colours() {
        assert_eq!(diverging_rgb(0.0, 1.0), [255, 255, 255]);
        assert_eq!(diverging_rgb(-1.0, 1.0), [255, 0, 0]);
        assert_eq!(diverging_rgb(2.0, 1.0), [0, 0, 255]);
    }
}
