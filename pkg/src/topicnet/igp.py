"""Image-to-group propagation: inter-image affinities and consensus mix.

Works on one group's lateral features at a reduced working resolution
S.  Token order everywhere is (image, pixel) row-major, so converting
the [N*S*S, N*S*S] affinity matrices to per-image-pair form is an index
permutation, never a raw reshape.
"""

from __future__ import annotations

from .conv import conv2d_bias, resize_to
from .errors import ShapeError
from .tensor import Tensor


def to_working_resolution(x: Tensor, s: int, mode: str = "bilinear") -> Tensor:
    """Resize [N,D,H,W] features to the attention resolution [N,D,S,S]."""
    if s < 2:
        raise ShapeError(f"working resolution {s} is below the minimum of 2")
    return resize_to(x, s, mode)


def _tokens(x: Tensor) -> Tensor:
    n, d, s1, s2 = x.shape
    return x.transpose((0, 2, 3, 1)).reshape((n * s1 * s2, d))


def build_pairwise_affinities(x: Tensor, params: dict):
    """(A_g, A_theta_phi): [N*S*S, N*S*S] token-affinity matrices.

    g, theta, phi are 1x1 convs to D' = D/2; A_g = G G^T is the
    symmetric self-similarity of the g-projection, A_theta_phi the
    directed theta/phi similarity.
    """
    g = _tokens(conv2d_bias(x, params["igp.g.w"], params["igp.g.b"]))
    theta = _tokens(conv2d_bias(x, params["igp.theta.w"], params["igp.theta.b"]))
    phi = _tokens(conv2d_bias(x, params["igp.phi.w"], params["igp.phi.b"]))
    a_g = g @ g.transpose((1, 0))
    a_tp = theta @ phi.transpose((1, 0))
    return a_g, a_tp


def reduce_over_partner_images(a: Tensor, n: int, s: int) -> Tensor:
    """[N*S*S, N*S*S] -> [S*S, S*S, N]: max over the partner image axis.

    Entry [p, q, n1] is the strongest affinity between pixel p of image
    n1 and pixel q across all partner images n2.
    """
    ss = s * s
    if a.shape != (n * ss, n * ss):
        raise ShapeError(f"affinity shape {a.shape} does not match N={n}, S={s}")
    return a.reshape((n, ss, n, ss)).transpose((1, 3, 0, 2)).max(axis=3)


def compose_inter_image_similarity(a_g_red: Tensor, a_tp_red: Tensor) -> Tensor:
    """[S*S,S*S,N] pair -> A: [S*S,N,N].

    A_theta_phi is softmax-normalized over its pixel axis q, then
    contracted against A_g per pixel p:
    A[p,n1,n2] = sum_q A_g[p,q,n1] * softmax_q(A_tp)[p,q,n2].
    """
    if a_g_red.shape != a_tp_red.shape:
        raise ShapeError(f"reduced affinities disagree: {a_g_red.shape} vs {a_tp_red.shape}")
    a_tp_norm = a_tp_red.softmax(axis=1)
    return a_g_red.transpose((0, 2, 1)) @ a_tp_norm


def group_semantics_mix(a: Tensor, x: Tensor, softmax_before_mean: bool = False) -> Tensor:
    """Mix each image's features from the group via inter-image weights.

    Default order follows the similarity text: average A over pixels to
    [N,N], softmax the rows, then r_n = sum_n' W[n,n'] x_n'.  The flag
    applies the row softmax per pixel before averaging instead.
    """
    n, d, s1, s2 = x.shape
    if a.shape[-2:] != (n, n):
        raise ShapeError(f"similarity shape {a.shape} does not match N={n}")
    if softmax_before_mean:
        w = a.softmax(axis=2).mean(axis=0)
    else:
        w = a.mean(axis=0).softmax(axis=1)
    return (w @ x.reshape((n, d * s1 * s2))).reshape((n, d, s1, s2))


def igp_block(x: Tensor, params: dict, softmax_before_mean: bool = False) -> Tensor:
    """Full propagation at working resolution: [N,D,S,S] -> r [N,D,S,S]."""
    n, _, s, _ = x.shape
    a_g, a_tp = build_pairwise_affinities(x, params)
    a = compose_inter_image_similarity(
        reduce_over_partner_images(a_g, n, s),
        reduce_over_partner_images(a_tp, n, s),
    )
    return group_semantics_mix(a, x, softmax_before_mean)
