import math

import numpy as np
import pytest

from difkit import grad as G
from difkit.grad import Array, grad_check
from difkit.hyper import DerivNetSpec, HyperExecutor
from difkit.nets import (DIFModel, DiscSpec, EncoderSpec, HeadSpec, ModelSpec, freq_positional_encoding,
                         load_checkpoint, save_checkpoint)

TINY = ModelSpec(encoder=EncoderSpec(2, 2, 8, 16), head=HeadSpec(4, 8), deriv=DerivNetSpec(2, 3, 4),
                 disc=DiscSpec(2, 8), decoder_hidden=8, decoder_out_scale=1.0)


def tiny_model(seed=0):
    return DIFModel(TINY, 2, seed=seed)


def test_positional_table_first_row_and_bounds():
    pe = freq_positional_encoding(50, 16)
    assert np.all(pe[0, 0::2] == 0) and np.all(pe[0, 1::2] == 1)
    assert np.abs(pe).max() <= 1


def test_positional_rows_distinct():
    pe = freq_positional_encoding(2000, 16)
    rounded = {tuple(np.round(r, 12)) for r in pe}
    assert len(rounded) == len(pe)


def test_encoder_shape_independent_of_window():
    m = tiny_model()
    rng = np.random.default_rng(0)
    for T_c in (5, 17, 33):
        assert m.encode(rng.normal(size=(3, T_c, 2))).shape == (3, 8)


def test_encoder_sees_time_order():
    m = tiny_model()
    x = np.random.default_rng(1).normal(size=(1, 12, 2))
    z1 = m.encode(x).data
    z2 = m.encode(x[:, ::-1].copy()).data
    assert not np.allclose(z1, z2)


def test_identical_inputs_identical_rows():
    m = tiny_model()
    x = np.repeat(np.random.default_rng(2).normal(size=(1, 10, 2)), 4, axis=0)
    z = m.encode(x).data
    assert all(np.array_equal(z[0], z[i]) for i in range(4))


def test_compose_identity_and_symmetry():
    rng = np.random.default_rng(3)
    a, b = Array(rng.normal(size=(2, 4))), Array(rng.normal(size=(2, 4)))
    assert np.array_equal(DIFModel.compose(a, Array(np.zeros((2, 4)))).data, a.data)
    assert np.array_equal(DIFModel.compose(a, b).data, DIFModel.compose(b, a).data)


def test_heads_and_decoder_shapes():
    m = tiny_model()
    xp = np.random.default_rng(4).normal(size=(3, 9, 2))
    F, Fc, zc, ze = m.function_vectors(xp)
    assert zc.shape == ze.shape == (3, TINY.head.embed_dim)
    assert F.shape == Fc.shape == (3, m.layout.m)
    assert not np.allclose(F.data, Fc.data)
    F2, Fc2, _, _ = m.function_vectors(xp)
    assert np.array_equal(F.data, F2.data) and np.array_equal(Fc.data, Fc2.data)


def test_zero_env_head_makes_full_equal_invariant():
    m = tiny_model()
    last = max(int(k[3]) for k in m.groups["env"] if k.endswith("weight"))
    m.groups["env"][f"mlp{last}.weight"].data[...] = 0
    m.groups["env"][f"mlp{last}.bias"].data[...] = 0
    F, Fc, _, ze = m.function_vectors(np.random.default_rng(5).normal(size=(3, 9, 2)))
    assert np.all(ze.data == 0)
    assert np.array_equal(F.data, Fc.data)


def test_discriminator_uniform_logits():
    m = tiny_model()
    for p in m.phi:
        p.data[...] = 0
    logits = m.discriminate(Array(np.ones((5, 4))))
    assert logits.shape == (5, 4)
    assert G.cross_entropy(logits, np.array([0, 1, 2, 3, 0])).item() == pytest.approx(math.log(4))


def test_parameter_groups_partition():
    m = tiny_model()
    ids = {g: m.param_ids(g) for g in ("enc", "inv", "env", "dec", "disc")}
    all_ids = set().union(*ids.values())
    assert sum(len(v) for v in ids.values()) == len(all_ids)
    assert {id(p) for p in m.theta} == ids["enc"] | ids["inv"] | ids["env"] | ids["dec"]
    assert {id(p) for p in m.theta_c} == ids["enc"] | ids["inv"] | ids["dec"]
    assert {id(p) for p in m.theta_bar_e} == ids["enc"] | ids["env"]
    assert {id(p) for p in m.theta_bar_c} == ids["enc"] | ids["inv"]
    assert {id(p) for p in m.phi} == ids["disc"]


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient(seed):
    m = tiny_model(seed)
    rng = np.random.default_rng(100 + seed)
    xp, xs = rng.normal(size=(2, 6, 2)), rng.normal(size=(2, 5, 2))
    target = rng.normal(size=(2, 5, 2))
    ex = HyperExecutor(m.layout)

    def loss():
        F, Fc, _, _ = m.function_vectors(xp)
        out = ex(G.concat([F, Fc], axis=0), Array(np.concatenate([xs, xs])))
        diff = G.sub(out, Array(np.concatenate([target, target])))
        return G.mean(G.mul(diff, diff))
    rep = grad_check(loss, m.params("enc", "inv", "env", "dec"), tol=1e-4)
    assert rep.passed, rep


def test_checkpoint_round_trip(tmp_path):
    m = tiny_model(7)
    save_checkpoint(m, tmp_path / "m.ckpt", {"T_c": 9, "method": "dif"})
    back, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert back.spec == m.spec and extra == {"T_c": "9", "method": "dif"}
    for k, v in m.state().items():
        assert np.array_equal(back.state()[k], v)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_text("hello\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
