//! Conversion between `[H, W, C]` images and `[N, P²·C]` patch sequences.
//!
//! Patches are numbered in reading order; inside a patch, pixels are in
//! reading order with channels innermost.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn geometry(shape: &[usize], p: usize) -> Result<(usize, usize, usize)> {
    let [h, w, c] = shape else {
        return Err(Error::Config(format!("expected an [H, W, C] image, got {shape:?}")));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {p}-pixel patches"
        )));
    }
    Ok((*h, *w, *c))
}

pub fn patchify<T: Real>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = geometry(image.shape(), p)?;
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let start = ((py * p + y) * w + px * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new([gh * gw, p * p * c], out)
}

pub fn unpatchify<T: Real>(patches: &Tensor<T>, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor<T>> {
    geometry(&[h, w, c], p)?;
    let (gh, gw) = (h / p, w / p);
    if patches.shape() != [gh * gw, p * p * c] {
        return Err(Error::dim("unpatchify", patches.shape(), &[gh * gw, p * p * c]));
    }
    let src = patches.data();
    let mut out = vec![T::zero(); h * w * c];
    let row = p * c;
    for py in 0..gh {
        for px in 0..gw {
            let patch = &src[(py * gw + px) * p * row..(py * gw + px + 1) * p * row];
            for y in 0..p {
                let start = ((py * p + y) * w + px * p) * c;
                out[start..start + row].copy_from_slice(&patch[y * row..(y + 1) * row]);
            }
        }
    }
    Tensor::new([h, w, c], out)
}

/// Stacks the patch sequences of several same-sized images into `[b, N, D]`.
pub fn patchify_batch<T: Real>(images: &[&Tensor<T>], p: usize) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Contract("cannot patchify an empty batch".into()));
    };
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    let mut dims = [0, 0];
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::dim("patchify_batch", &shape, img.shape()));
        }
        let patches = patchify(img, p)?;
        dims = [patches.shape()[0], patches.shape()[1]];
        data.extend(patches.into_data());
    }
    Tensor::new([images.len(), dims[0], dims[1]], data)
}

/// Splits `[b, N, D]` back into `b` images.
pub fn unpatchify_batch<T: Real>(
    patches: &Tensor<T>,
    h: usize,
    w: usize,
    c: usize,
    p: usize,
) -> Result<Vec<Tensor<T>>> {
    let s = patches.shape();
    if s.len() != 3 {
        return Err(Error::dim("unpatchify_batch", s, &[0, 0, 0]));
    }
    (0..s[0])
        .map(|i| unpatchify(&Tensor::new([s[1], s[2]], patches.outer(i).to_vec())?, h, w, c, p))
        .collect()
}
