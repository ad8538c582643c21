from tat.autodiff import Tensor
from tat.layers import AttentionParams


def random_params(rng, d_model, n_heads, d_head, scale=0.5):
    inner = n_heads * d_head
    arrays = {
        "w_q": rng.normal(0, scale, (d_model, inner)),
        "b_q": rng.normal(0, scale, inner),
        "w_k": rng.normal(0, scale, (d_model, inner)),
        "b_k": rng.normal(0, scale, inner),
        "w_v": rng.normal(0, scale, (d_model, inner)),
        "b_v": rng.normal(0, scale, inner),
        "w_o": rng.normal(0, scale, (inner, d_model)),
        "b_o": rng.normal(0, scale, d_model),
    }
    params = AttentionParams(**{k: Tensor(v, requires_grad=True) for k, v in arrays.items()},
                             n_heads=n_heads, d_head=d_head)
    return params, {**arrays, "n_heads": n_heads, "d_head": d_head}
