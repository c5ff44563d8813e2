//! Direct-summation references, written without any engine kernel.

use mdda::tensor::Tensor;

/// Zero-padded grouped convolution by nested loops.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, cpg, k, _) = w.dims4().unwrap();
    let opg = cout / groups;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    assert_eq!(cpg * groups, cin);
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let o = out.data_mut();
    for s in 0..n {
        for oc in 0..cout {
            let g = oc / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..cpg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(s, g * cpg + ic, iy as usize, ix as usize) * w.at4(oc, ic, ky, kx);
                            }
                        }
                    }
                    o[((s * cout + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Per-sample MDConv reference: materialise `W ⊙ a_s ⊙ a_c ⊙ a_f` for each
/// sample and run the naive convolution on that sample alone.
pub fn materialized_mdconv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    spatial: &Tensor<f64>,
    channel: &Tensor<f64>,
    filter: &Tensor<f64>,
    pad: usize,
) -> Tensor<f64> {
    let (n, _, _, _) = x.dims4().unwrap();
    let (cout, cin, k, _) = w.dims4().unwrap();
    let mut outs = Vec::new();
    for s in 0..n {
        let wd = Tensor::from_fn(&[cout, cin, k, k], |i| {
            let kx = i % k;
            let ky = (i / k) % k;
            let ic = (i / (k * k)) % cin;
            let oc = i / (k * k * cin);
            w.data()[i]
                * spatial.data()[(s * k + ky) * k + kx]
                * channel.data()[s * cin + ic]
                * filter.data()[s * cout + oc]
        });
        outs.push(naive_conv2d(&x.sample(s).unwrap(), &wd, None, 1, pad, 1));
    }
    Tensor::stack(&outs).unwrap()
}
