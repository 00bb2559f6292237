use ndarray::{s, Array2, Array4, ArrayView3, Axis, Ix2, Ix4, IxDyn};
use rand::Rng;

use super::{join, Layer, Param, Tensor};

fn as4(x: &Tensor) -> ndarray::ArrayView4<'_, f32> {
    x.view().into_dimensionality::<Ix4>().expect("expected an NCHW tensor")
}

fn as2(x: &Tensor) -> ndarray::ArrayView2<'_, f32> {
    x.view().into_dimensionality::<Ix2>().expect("expected an NF tensor")
}

fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `C x H x W` image into a `(C*k*k) x (Ho*Wo)` column matrix.
fn im2col(x: ArrayView3<'_, f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut cols = vec![0f32; c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ho * wo), cols).unwrap()
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(cols: &Array2<f32>, (c, h, w): (usize, usize, usize), k: usize, stride: usize, pad: usize) -> Vec<f32> {
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let mut img = vec![0f32; c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    img
}

pub struct Conv2d {
    weight: Param,
    bias: Option<Param>,
    k: usize,
    stride: usize,
    pad: usize,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_c * k * k) as f32).sqrt();
        Conv2d {
            weight: Param::uniform(&[out_c, in_c, k, k], bound, rng),
            bias: bias.then(|| Param::uniform(&[out_c], bound, rng)),
            k,
            stride,
            pad,
            input: None,
        }
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        let o = self.weight.value.shape()[0];
        let n = self.weight.value.len() / o;
        self.weight.value.view().into_shape_with_order((o, n)).unwrap()
    }
}

impl Layer for Conv2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        let x = as4(x);
        let (n, _, h, w) = x.dim();
        let (ho, wo) = (
            out_size(h, self.k, self.stride, self.pad),
            out_size(w, self.k, self.stride, self.pad),
        );
        let wm = self.weight_matrix();
        let o = wm.nrows();
        let mut out = Array4::<f32>::zeros((n, o, ho, wo));
        for i in 0..n {
            let cols = im2col(x.index_axis(Axis(0), i), self.k, self.stride, self.pad);
            let y = wm.dot(&cols);
            let mut dst = out.index_axis_mut(Axis(0), i);
            let mut dst = dst.view_mut().into_shape_with_order((o, ho * wo)).unwrap();
            dst.assign(&y);
            if let Some(b) = &self.bias {
                for (mut row, bv) in dst.outer_iter_mut().zip(b.value.iter()) {
                    row += *bv;
                }
            }
        }
        out.into_dyn()
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.input = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let input = self.input.take().expect("backward before forward_train");
        let x = as4(&input);
        let (n, c, h, w) = x.dim();
        let g4 = as4(grad);
        let (o, ho, wo) = (g4.shape()[1], g4.shape()[2], g4.shape()[3]);
        let wm = self.weight_matrix().to_owned();
        let mut dw = Array2::<f32>::zeros(wm.raw_dim());
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        for i in 0..n {
            let gi = g4.index_axis(Axis(0), i);
            let gi = gi.as_standard_layout();
            let gm = gi.view().into_shape_with_order((o, ho * wo)).unwrap();
            let cols = im2col(x.index_axis(Axis(0), i), self.k, self.stride, self.pad);
            dw += &gm.dot(&cols.t());
            if let Some(b) = &mut self.bias {
                for (bg, row) in b.grad.iter_mut().zip(gm.outer_iter()) {
                    *bg += row.sum();
                }
            }
            let dcols = wm.t().dot(&gm);
            let img = col2im(&dcols, (c, h, w), self.k, self.stride, self.pad);
            dx.index_axis_mut(Axis(0), i)
                .assign(&ndarray::ArrayView3::from_shape((c, h, w), &img).unwrap());
        }
        let shape = self.weight.grad.raw_dim();
        self.weight.grad += &dw.into_shape_with_order(shape).unwrap();
        dx.into_dyn()
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

pub struct BatchNorm2d {
    weight: Param,
    bias: Param,
    running_mean: Param,
    running_var: Param,
    num_batches_tracked: Param,
    eps: f32,
    momentum: f32,
    cache: Option<(Array4<f32>, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            weight: Param::new(Tensor::ones(IxDyn(&[channels]))),
            bias: Param::new(Tensor::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(Tensor::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(Tensor::ones(IxDyn(&[channels]))),
            num_batches_tracked: Param::buffer(Tensor::zeros(IxDyn(&[]))),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    fn normalize(&self, x: ndarray::ArrayView4<'_, f32>, mean: &[f32], inv_std: &[f32]) -> (Array4<f32>, Array4<f32>) {
        let mut xhat = x.to_owned();
        for (ci, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            plane.mapv_inplace(|v| (v - mean[ci]) * inv_std[ci]);
        }
        let mut y = xhat.clone();
        for (ci, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.weight.value[ci], self.bias.value[ci]);
            plane.mapv_inplace(|v| v * g + b);
        }
        (xhat, y)
    }
}

impl Layer for BatchNorm2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mean: Vec<f32> = self.running_mean.value.iter().copied().collect();
        let inv: Vec<f32> = self
            .running_var
            .value
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        self.normalize(as4(x), &mean, &inv).1.into_dyn()
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let x4 = as4(x);
        let m = (x4.len() / x4.shape()[1]) as f32;
        let mut mean = Vec::new();
        let mut var = Vec::new();
        for plane in x4.axis_iter(Axis(1)) {
            let mu = plane.iter().map(|v| *v as f64).sum::<f64>() / m as f64;
            let vr = plane.iter().map(|v| (*v as f64 - mu).powi(2)).sum::<f64>() / m as f64;
            mean.push(mu as f32);
            var.push(vr as f32);
        }
        let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (xhat, y) = self.normalize(x4, &mean, &inv);
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ci in 0..mean.len() {
            let rm = &mut self.running_mean.value[ci];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ci];
            let rv = &mut self.running_var.value[ci];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * var[ci] * unbias;
        }
        self.num_batches_tracked.value.mapv_inplace(|v| v + 1.0);
        self.cache = Some((xhat, inv));
        y.into_dyn()
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv) = self.cache.take().expect("backward before forward_train");
        let g = as4(grad);
        let m = (xhat.len() / xhat.shape()[1]) as f32;
        let mut dx = Array4::<f32>::zeros(xhat.raw_dim());
        for ci in 0..inv.len() {
            let gp = g.index_axis(Axis(1), ci);
            let xp = xhat.index_axis(Axis(1), ci);
            let sum_g: f32 = gp.sum();
            let sum_gx: f32 = gp.iter().zip(xp.iter()).map(|(a, b)| a * b).sum();
            self.weight.grad[ci] += sum_gx;
            self.bias.grad[ci] += sum_g;
            let gamma = self.weight.value[ci];
            let k = gamma * inv[ci] / m;
            let mut dp = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dp)
                .and(&gp)
                .and(&xp)
                .for_each(|d, &gv, &xv| *d = k * (m * gv - sum_g - xv * sum_gx));
        }
        dx.into_dyn()
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
        f(join(prefix, "num_batches_tracked"), &mut self.num_batches_tracked);
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
        f(join(prefix, "num_batches_tracked"), &self.num_batches_tracked);
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&self, x: &Tensor) -> Tensor {
        x.mapv(|v| v.max(0.0))
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        grad * &self.mask.take().expect("backward before forward_train")
    }
}

pub struct MaxPool2d {
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d {
            k,
            stride,
            pad,
            cache: None,
        }
    }

    fn run(&self, x: &Tensor) -> (Array4<f32>, Vec<usize>) {
        let x = as4(x).as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (
            out_size(h, self.k, self.stride, self.pad),
            out_size(w, self.k, self.stride, self.pad),
        );
        let xs = x.as_slice().unwrap();
        let mut out = Array4::<f32>::zeros((n, c, ho, wo));
        let mut arg = vec![0usize; n * c * ho * wo];
        let os = out.as_slice_mut().unwrap();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = base;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    os[o] = best;
                    arg[o] = at;
                }
            }
        }
        (out, arg)
    }
}

impl Layer for MaxPool2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x).0.into_dyn()
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (out, arg) = self.run(x);
        let s = x.shape();
        self.cache = Some((arg, [s[0], s[1], s[2], s[3]]));
        out.into_dyn()
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (arg, shape) = self.cache.take().expect("backward before forward_train");
        let mut dx = vec![0f32; shape.iter().product()];
        let g = grad.as_standard_layout();
        for (gv, &at) in g.iter().zip(&arg) {
            dx[at] += gv;
        }
        Tensor::from_shape_vec(IxDyn(&shape), dx).unwrap()
    }
}

/// Non-overlapping average pooling (stride = kernel, no padding).
pub struct AvgPool2d {
    k: usize,
    input_shape: Option<[usize; 4]>,
}

impl AvgPool2d {
    pub fn new(k: usize) -> Self {
        AvgPool2d { k, input_shape: None }
    }
}

impl Layer for AvgPool2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        let x = as4(x);
        let (n, c, h, w) = x.dim();
        let k = self.k;
        let (ho, wo) = (h / k, w / k);
        let scale = 1.0 / (k * k) as f32;
        Array4::from_shape_fn((n, c, ho, wo), |(i, ci, oy, ox)| {
            x.slice(s![i, ci, oy * k..(oy + 1) * k, ox * k..(ox + 1) * k]).sum() * scale
        })
        .into_dyn()
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let s = x.shape();
        self.input_shape = Some([s[0], s[1], s[2], s[3]]);
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, h, w] = self.input_shape.take().expect("backward before forward_train");
        let g = as4(grad);
        let k = self.k;
        let scale = 1.0 / (k * k) as f32;
        let (ho, wo) = (h / k, w / k);
        Array4::from_shape_fn((n, c, h, w), |(i, ci, y, x)| {
            let (oy, ox) = (y / k, x / k);
            if oy < ho && ox < wo {
                g[[i, ci, oy, ox]] * scale
            } else {
                0.0
            }
        })
        .into_dyn()
    }
}

/// Average pooling to a fixed output grid, using torch's bin boundaries.
pub struct AdaptiveAvgPool2d {
    out: (usize, usize),
    input_shape: Option<[usize; 4]>,
}

fn bins(size: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| (i * size / out, ((i + 1) * size).div_ceil(out)))
        .collect()
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        AdaptiveAvgPool2d {
            out: (out_h, out_w),
            input_shape: None,
        }
    }
}

impl Layer for AdaptiveAvgPool2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        let x = as4(x);
        let (n, c, h, w) = x.dim();
        let (by, bx) = (bins(h, self.out.0), bins(w, self.out.1));
        Array4::from_shape_fn((n, c, self.out.0, self.out.1), |(i, ci, oy, ox)| {
            let ((y0, y1), (x0, x1)) = (by[oy], bx[ox]);
            x.slice(s![i, ci, y0..y1, x0..x1]).sum() / ((y1 - y0) * (x1 - x0)) as f32
        })
        .into_dyn()
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let s = x.shape();
        self.input_shape = Some([s[0], s[1], s[2], s[3]]);
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, h, w] = self.input_shape.take().expect("backward before forward_train");
        let g = as4(grad);
        let (by, bx) = (bins(h, self.out.0), bins(w, self.out.1));
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        for i in 0..n {
            for ci in 0..c {
                for (oy, &(y0, y1)) in by.iter().enumerate() {
                    for (ox, &(x0, x1)) in bx.iter().enumerate() {
                        let v = g[[i, ci, oy, ox]] / ((y1 - y0) * (x1 - x0)) as f32;
                        dx.slice_mut(s![i, ci, y0..y1, x0..x1]).mapv_inplace(|d| d + v);
                    }
                }
            }
        }
        dx.into_dyn()
    }
}

#[derive(Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Flatten {
    fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.shape()[0];
        let f = x.len() / n.max(1);
        x.as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[n, f]))
            .unwrap()
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.input_shape = Some(x.shape().to_vec());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.input_shape.take().expect("backward before forward_train");
        grad.as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&shape))
            .unwrap()
    }
}

/// Fully connected layer with torch weight layout `(out, in)`.
pub struct Linear {
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        Linear {
            weight: Param::uniform(&[outputs, inputs], bound, rng),
            bias: Param::uniform(&[outputs], bound, rng),
            input: None,
        }
    }
}

impl Layer for Linear {
    fn forward(&self, x: &Tensor) -> Tensor {
        let w = as2(&self.weight.value);
        let mut y = as2(x).dot(&w.t());
        y += &self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y.into_dyn()
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.input = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let input = self.input.take().expect("backward before forward_train");
        let g = as2(grad);
        self.weight.grad += &g.t().dot(&as2(&input)).into_dyn();
        self.bias.grad += &g.sum_axis(Axis(0)).into_dyn();
        g.dot(&as2(&self.weight.value)).into_dyn()
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Two 3x3 convolutions with an identity (or projected) shortcut.
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    out_mask: Option<Tensor>,
}

impl BasicBlock {
    pub fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2d::new(in_c, out_c, 1, stride, 0, false, rng),
                BatchNorm2d::new(out_c),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(in_c, out_c, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(out_c),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_c, out_c, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_c),
            downsample,
            out_mask: None,
        }
    }
}

impl Layer for BasicBlock {
    fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.relu1.forward(&self.bn1.forward(&self.conv1.forward(x)));
        let h = self.bn2.forward(&self.conv2.forward(&h));
        let shortcut = match &self.downsample {
            Some((c, b)) => b.forward(&c.forward(x)),
            None => x.clone(),
        };
        (h + shortcut).mapv(|v| v.max(0.0))
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let h = self.conv1.forward_train(x);
        let h = self.bn1.forward_train(&h);
        let h = self.relu1.forward_train(&h);
        let h = self.conv2.forward_train(&h);
        let h = self.bn2.forward_train(&h);
        let shortcut = match &mut self.downsample {
            Some((c, b)) => {
                let s = c.forward_train(x);
                b.forward_train(&s)
            }
            None => x.clone(),
        };
        let sum = h + shortcut;
        self.out_mask = Some(sum.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        sum.mapv(|v| v.max(0.0))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = grad * &self.out_mask.take().expect("backward before forward_train");
        let main = self.bn2.backward(&g);
        let main = self.conv2.backward(&main);
        let main = self.relu1.backward(&main);
        let main = self.bn1.backward(&main);
        let main = self.conv1.backward(&main);
        let short = match &mut self.downsample {
            Some((c, b)) => {
                let s = b.backward(&g);
                c.backward(&s)
            }
            None => g,
        };
        main + short
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &mut self.downsample {
            c.visit(&join(prefix, "downsample.0"), f);
            b.visit(&join(prefix, "downsample.1"), f);
        }
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.conv1.visit_ref(&join(prefix, "conv1"), f);
        self.bn1.visit_ref(&join(prefix, "bn1"), f);
        self.conv2.visit_ref(&join(prefix, "conv2"), f);
        self.bn2.visit_ref(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &self.downsample {
            c.visit_ref(&join(prefix, "downsample.0"), f);
            b.visit_ref(&join(prefix, "downsample.1"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn conv_gradients() {
        check(&mut Conv2d::new(2, 3, 3, 2, 1, true, &mut rng()), &[2, 2, 7, 6], 2e-2);
        check(&mut Conv2d::new(3, 2, 1, 1, 0, false, &mut rng()), &[1, 3, 4, 4], 2e-2);
    }

    #[test]
    fn batchnorm_gradients() {
        check(&mut BatchNorm2d::new(3), &[4, 3, 3, 3], 3e-2);
    }

    #[test]
    fn pooling_gradients() {
        check(&mut MaxPool2d::new(3, 2, 1), &[2, 2, 7, 7], 2e-2);
        check(&mut AvgPool2d::new(2), &[1, 2, 6, 5], 2e-2);
        check(&mut AdaptiveAvgPool2d::new(3, 2), &[2, 1, 7, 5], 2e-2);
    }

    #[test]
    fn linear_and_relu_gradients() {
        let mut r = rng();
        let mut seq = crate::nn::Sequential::new()
            .push("0", Linear::new(5, 4, &mut r))
            .push("1", Relu::new())
            .push("2", Linear::new(4, 2, &mut r));
        check(&mut seq, &[3, 5], 2e-2);
    }

    #[test]
    fn residual_block_gradients() {
        check(&mut BasicBlock::new(2, 3, 2, &mut rng()), &[3, 2, 6, 6], 5e-2);
        check(&mut BasicBlock::new(2, 2, 1, &mut rng()), &[3, 2, 5, 5], 5e-2);
    }

    #[test]
    fn conv_matches_direct_definition() {
        let conv = Conv2d::new(2, 2, 3, 2, 1, true, &mut rng());
        let mut r = rng();
        let x = Tensor::from_shape_simple_fn(IxDyn(&[1, 2, 5, 5]), || r.random_range(-1.0..1.0f32));
        let y = conv.forward(&x);
        let (w, b) = (&conv.weight.value, &conv.bias.as_ref().unwrap().value);
        for o in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w[[o, c, ky, kx]] * x[[0, c, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[0, o, oy, ox]]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn adaptive_pool_bins_cover_input() {
        assert_eq!(bins(7, 3), vec![(0, 3), (2, 5), (4, 7)]);
        assert_eq!(bins(4, 4), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor::from_shape_vec(IxDyn(&[2, 1, 1, 2]), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        bn.forward_train(&x);
        assert!((bn.running_mean.value[0] - 0.4).abs() < 1e-6);
        let y = bn.forward(&Tensor::zeros(IxDyn(&[1, 1, 1, 1])));
        let expected = -0.4 / (bn.running_var.value[0] + 1e-5).sqrt();
        assert!((y[[0, 0, 0, 0]] - expected).abs() < 1e-6);
    }
}
