//! Symmetric InfoNCE loss and the encoder tower math, generic over float width
//! so gradient checks can run in `f64` while training runs in `f32`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar};
use num_traits::Float;

use crate::error::{Error, Result};

/// Loss value and its gradients.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss<F> {
    pub loss: F,
    pub grad_image: Array2<F>,
    pub grad_text: Array2<F>,
    pub grad_log_scale: F,
}

/// Symmetric image-to-text / text-to-image cross-entropy over a batch.
///
/// Row `i` of `image` is paired with row `i` of `text`. Logits are
/// `exp(log_scale) * image · textᵀ`; the loss is the mean of the row-wise
/// and column-wise softmax cross-entropies against the diagonal. Rows are
/// expected to be unit norm but this is not enforced, so the function stays
/// differentiable in a neighbourhood of the unit sphere.
pub fn contrastive_loss<F>(image: ArrayView2<F>, text: ArrayView2<F>, log_scale: F) -> Result<ContrastiveLoss<F>>
where
    F: Float + LinalgScalar,
{
    let n = image.nrows();
    if n == 0 {
        return Err(Error::Empty("contrastive batch".into()));
    }
    if text.nrows() != n || text.ncols() != image.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "image batch {:?} vs text batch {:?}",
            image.shape(),
            text.shape()
        )));
    }
    if !log_scale.is_finite() || !image.iter().chain(text.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("contrastive loss inputs".into()));
    }

    let scale = log_scale.exp();
    let logits = image.dot(&text.t()).mapv(|s| s * scale);

    // Row softmax (image -> text) and column softmax (text -> image).
    let mut row_p = Array2::<F>::zeros((n, n));
    let mut col_p = Array2::<F>::zeros((n, n));
    let mut row_lse = F::zero();
    let mut col_lse = F::zero();
    for i in 0..n {
        row_lse = row_lse + softmax_into(logits.row(i), row_p.row_mut(i));
        col_lse = col_lse + softmax_into(logits.column(i), col_p.column_mut(i));
    }
    let nf = F::from(n).expect("batch size fits in float");
    let two = F::one() + F::one();
    let trace = logits.diag().iter().fold(F::zero(), |a, &b| a + b);
    let loss = ((row_lse - trace) + (col_lse - trace)) / (two * nf);

    // d loss / d logits = (P + Q - 2I) / 2N
    let mut grad_logits = (&row_p + &col_p).mapv(|v| v / (two * nf));
    for i in 0..n {
        grad_logits[[i, i]] = grad_logits[[i, i]] - F::one() / nf;
    }
    let grad_log_scale = grad_logits
        .iter()
        .zip(logits.iter())
        .fold(F::zero(), |acc, (&g, &l)| acc + g * l);
    let grad_sim = grad_logits.mapv(|g| g * scale);
    let grad_image = grad_sim.dot(&text);
    let grad_text = grad_sim.t().dot(&image);

    Ok(ContrastiveLoss {
        loss,
        grad_image,
        grad_text,
        grad_log_scale,
    })
}

/// Writes softmax(`logits`) into `out` and returns logsumexp(`logits`).
fn softmax_into<F: Float>(logits: ArrayView1<F>, mut out: ndarray::ArrayViewMut1<F>) -> F {
    let max = logits.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut z = F::zero();
    for (o, &l) in out.iter_mut().zip(logits.iter()) {
        *o = (l - max).exp();
        z = z + *o;
    }
    out.mapv_inplace(|v| v / z);
    max + z.ln()
}

/// Affine map followed by L2 normalization, row by row.
///
/// Returns the unit embeddings and the pre-normalization norms.
pub fn tower_forward<F>(weight: ArrayView2<F>, bias: ArrayView1<F>, x: ArrayView2<F>) -> Result<(Array2<F>, Array1<F>)>
where
    F: Float + LinalgScalar,
{
    let mut u = x.dot(&weight.t());
    for mut row in u.axis_iter_mut(Axis(0)) {
        row.zip_mut_with(&bias, |a, &b| *a = *a + b);
    }
    let mut norms = Array1::<F>::zeros(u.nrows());
    for (i, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.iter().fold(F::zero(), |a, &v| a + v * v).sqrt();
        if !(norm > F::zero()) || !norm.is_finite() {
            return Err(Error::DegenerateInput(format!("row {i} maps to a zero or non-finite vector")));
        }
        row.mapv_inplace(|v| v / norm);
        norms[i] = norm;
    }
    Ok((u, norms))
}

/// Back-propagates embedding gradients through [`tower_forward`].
///
/// For `e = u / |u|`, `de/du = (I - e eᵀ) / |u|`.
pub fn tower_backward<F>(
    emb: ArrayView2<F>,
    norms: ArrayView1<F>,
    grad_emb: ArrayView2<F>,
    x: ArrayView2<F>,
) -> (Array2<F>, Array1<F>)
where
    F: Float + LinalgScalar,
{
    let mut grad_u = grad_emb.to_owned();
    for ((mut g, e), &norm) in grad_u.axis_iter_mut(Axis(0)).zip(emb.axis_iter(Axis(0))).zip(norms.iter()) {
        let proj = g.iter().zip(e.iter()).fold(F::zero(), |a, (&gi, &ei)| a + gi * ei);
        for (gi, &ei) in g.iter_mut().zip(e.iter()) {
            *gi = (*gi - proj * ei) / norm;
        }
    }
    let grad_w = grad_u.t().dot(&x);
    let grad_b = grad_u.sum_axis(Axis(0));
    (grad_w, grad_b)
}
