import numpy as np
import pytest

from lgsleep import model as M, nn
from lgsleep.errors import ShapeError


def _record_shapes(net, layers):
    """Wrap ``forward`` of the given layers to log their output shapes."""
    log = []
    for layer in layers:
        orig = layer.forward

        def fwd(x, training=False, _orig=orig, _layer=layer):
            y = _orig(x, training)
            log.append((type(_layer).__name__, x.shape, y.shape))
            return y

        layer.forward = fwd
    return log


@pytest.fixture(scope="module")
def full_net():
    return M.LGSleep(M.FULL, seed=0)


def test_full_width_activation_shapes(full_net):
    x = np.random.default_rng(0).standard_normal((4, 19, 512, 1))
    act = full_net.forward(x, training=True)
    assert act.U.shape == (4, 19, 512, 64)
    assert act.S.shape == (4, 19, 256, 64)
    assert act.A.shape == (4, 32)
    assert act.Z.shape == (4, 3)
    assert act.X_hat.shape == (4, 19, 512, 1)
    np.testing.assert_allclose(act.Z.sum(axis=1), 1.0, atol=1e-12)


def test_full_width_length_chain():
    net = M.LGSleep(M.FULL, seed=1)
    log = _record_shapes(net, [net.stack.pool, net.up1, net.up2, net.dec_conv, net.dec_out])
    net.forward(np.random.default_rng(1).standard_normal((1, 19, 512, 1)), training=True)
    assert log[0][0] == "MaxPool1D" and (log[0][1][1], log[0][2][1]) == (512, 256)
    assert log[1][0] == "UpSample1D" and (log[1][1][1], log[1][2][1]) == (8, 256)
    assert log[2][0] == "Conv1D" and log[2][2] == (19, 256, 64)
    assert log[3][0] == "UpSample1D" and (log[3][1][1], log[3][2][1]) == (256, 512)
    assert log[4][2] == (19, 512, 1)
    assert len(log) == 5


def test_desk_shapes_and_input_validation():
    net = M.LGSleep(M.DESK, seed=0)
    x = np.random.default_rng(0).standard_normal((3, 19, 512, 1))
    act = net.forward(x, training=True)
    assert act.A.shape == (3, 32) and act.X_hat.shape == x.shape
    for bad in [(3, 19, 512), (3, 18, 512, 1), (3, 19, 256, 1)]:
        with pytest.raises(ShapeError):
            net.encode(np.zeros(bad))
    with pytest.raises(ShapeError):
        net.decode(np.zeros((2, 31)))


def test_config_rejects_broken_chain():
    with pytest.raises(ValueError):
        M.ModelConfig(up1=16)
    with pytest.raises(ValueError):
        M.ModelConfig(slice_len=511)
    with pytest.raises(ValueError):
        M.ModelConfig.from_dict({"conv_filterz": 3})


def test_parameter_counts_analytic():
    # hand-derived from the layer table; biases are dropped ahead of batch norm
    conv = 64 * 64
    bn = 2 * 64
    enc_lstm = 256 * 64 * 128 + 32 * 128 + 128
    head = 32 * 32 + 32 + 32 * 3 + 3
    dec_lstm = 32 * 2048 + 512 * 2048 + 2048
    dec_conv = 9 * 64 * 64
    dec_out = 64 + 1
    want = {
        "LGSleep": conv + bn + enc_lstm + head + dec_lstm + dec_conv + bn + dec_out,
        "CNN": conv + bn + (19 * 256 * 64) * 32 + 32 + 32 * 3 + 3,
        "LSTM": 512 * 128 + 32 * 128 + 128 + head,
        "FC": 19 * 512 * 32 + 32 + head,
    }
    got = {k: M.build_backbone(k, M.FULL).n_params() for k in M.BACKBONES}
    assert got == want
    # the flattened-trial dense layers dominate: LSTM < FC < LGSleep < CNN
    assert got["LSTM"] < got["FC"] < got["LGSleep"] < got["CNN"]


def test_backbone_outputs_and_structure():
    x = np.random.default_rng(2).standard_normal((2, 19, 512, 1))
    for kind in M.BACKBONES:
        net = M.build_backbone(kind, M.DESK, seed=3)
        lg = net.logits(x, training=True)
        p = nn.softmax(lg)
        assert p.shape == (2, 3)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    cnn = M.build_backbone("CNN", M.DESK)
    assert not any("lstm" in p.name for p in cnn.params())
    assert not M.build_backbone("FC", M.DESK).has_decoder
    with pytest.raises(ValueError):
        M.build_backbone("GRU")


def test_classifier_uniform_and_shift_invariance():
    net = M.LGSleep(M.DESK, seed=0)
    for p in net.head.layers[0].params() + net.head.layers[2].params():
        p.value[...] = 0.0
    z = nn.softmax(net.head.forward(np.zeros((2, 32))))
    np.testing.assert_array_equal(z, np.full((2, 3), 1 / 3))
    lg = np.random.default_rng(0).standard_normal((20, 3))
    assert np.array_equal(nn.softmax(lg).argmax(1), nn.softmax(lg + 123.0).argmax(1))


def _trained_once(kind="LGSleep", seed=0):
    net = M.build_backbone(kind, M.DESK, seed=seed)
    x = np.random.default_rng(seed).standard_normal((4, 19, 512, 1))
    M.compute_loss(net, x, np.array([0, 1, 2, 0]), backward=False)  # fills BN running stats
    return net, x


def test_identical_rows_identical_outputs():
    net, x = _trained_once()
    x2 = np.concatenate([x[:1], x[:1]])
    A = net.encode(x2)
    assert np.array_equal(A[0], A[1])
    xh = net.decode(np.concatenate([A[:1], A[:1]]))
    assert np.array_equal(xh[0], xh[1])


def test_inference_permutation_equivariant():
    net, x = _trained_once()
    perm = np.array([2, 0, 3, 1])
    s, p = M.predict(net, x)
    s2, p2 = M.predict(net, x[perm])
    np.testing.assert_allclose(p2, p[perm], rtol=0, atol=1e-14)
    assert np.array_equal(s2, s[perm])


def test_predict_matches_stepwise_composition():
    net, x = _trained_once()
    A = net.encode(x, training=False)
    h = np.maximum(A @ net.head.fc1.W.value + net.head.fc1.b.value, 0.0)
    lg = h @ net.head.out.W.value + net.head.out.b.value
    e = np.exp(lg - lg.max(axis=1, keepdims=True))
    _, p = M.predict(net, x)
    np.testing.assert_allclose(p, e / e.sum(axis=1, keepdims=True), rtol=1e-13)


def test_predict_tie_goes_to_lower_index():
    p = np.array([[0.2, 0.5, 0.3], [0.4, 0.4, 0.2]])
    assert p.argmax(axis=1).tolist() == [1, 0]


def test_phase1_total_is_sum_of_independent_pieces():
    net = M.LGSleep(M.DESK, seed=4)
    x = np.random.default_rng(4).standard_normal((3, 19, 512, 1))
    y = np.array([2, 0, 1])
    net.reseed_dropout(11)
    r = M.lg_sleep_loss(net, x, y, phase=1, backward=False)
    net.reseed_dropout(11)
    A = net.encode(x, training=True)
    lc, _ = nn.softmax_xent(net.head.forward(A, True), y)
    lm, _ = nn.mse(x, net.decode(A, True))
    assert r.classification == lc and r.reconstruction == lm
    assert r.total == lc + lm


def test_loss_reconstruction_fixed_point():
    net = M.LGSleep(M.DESK, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 19, 512, 1))
    net.reseed_dropout(1)
    xh = net.decode(net.encode(x, True), True)
    assert nn.mse(xh, xh)[0] == 0.0


def test_phase2_decoder_gradients_exactly_zero():
    net = M.LGSleep(M.DESK, seed=5)
    for p in net.params():
        p.grad[...] = 1.0
    x = np.random.default_rng(5).standard_normal((3, 19, 512, 1))
    M.lg_sleep_loss(net, x, np.array([0, 1, 2]), class_weights=[1.5, 7.0, 1.0], phase=2)
    dec = {p.name for p in net.decoder_params()}
    assert dec and all(not np.any(p.grad) for p in net.params() if p.name in dec)
    assert any(np.any(p.grad) for p in net.params() if p.name not in dec)


def test_phase2_requires_labels():
    net = M.LGSleep(M.DESK, seed=0)
    x = np.zeros((2, 19, 512, 1))
    with pytest.raises(ValueError):
        M.lg_sleep_loss(net, x, np.array([0, 1]), phase=2, labeled=np.array([False, False]))
    with pytest.raises(ValueError):
        M.lg_sleep_loss(net, x, np.array([0, 1]), phase=3)


def test_equal_weights_match_unweighted():
    net = M.LGSleep(M.DESK, seed=6)
    x = np.random.default_rng(6).standard_normal((4, 19, 512, 1))
    y = np.array([0, 1, 2, 1])
    net.reseed_dropout(2)
    a = M.lg_sleep_loss(net, x, y, class_weights=[1.0, 1.0, 1.0], phase=2, backward=False)
    net.reseed_dropout(2)
    b = M.lg_sleep_loss(net, x, y, class_weights=None, phase=2, backward=False)
    assert abs(a.total - b.total) <= 1e-12


def test_loss_is_deterministic():
    runs = []
    for _ in range(2):
        net = M.LGSleep(M.DESK, seed=8)
        x = np.random.default_rng(8).standard_normal((2, 19, 512, 1))
        runs.append(M.lg_sleep_loss(net, x, np.array([1, 2]), phase=1))
    assert runs[0] == runs[1]


@pytest.mark.parametrize("kind", ["CNN", "LSTM", "FC"])
def test_backbone_gradients(kind):
    net = M.build_backbone(kind, M.DESK, seed=1)
    x = np.random.default_rng(1).standard_normal((2, 19, 512, 1))
    y = np.array([0, 2])

    def f(back):
        net.reseed_dropout(3)
        r = M.compute_loss(net, x, y, class_weights=[1.5, 7.0, 1.0], backward=back, terms=not back)
        return r.total if back else r.terms

    r = nn.grad_check(f, net.params(), max_coords=60)
    assert r.max_rel_error < 1e-4


def test_full_loss_gradient_check():
    net = M.LGSleep(M.DESK, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 19, 512, 1))
    y = np.array([0, 2])

    def f(back):
        net.reseed_dropout(7)
        r = M.lg_sleep_loss(net, x, y, phase=1, backward=back, terms=not back)
        return r.total if back else r.terms

    r = nn.grad_check(f, net.params(), max_coords=200)
    assert r.max_rel_error < 1e-4
    assert min(r.n_coords, 1) and all(v < 1e-4 for v in r.per_param.values())


def test_checkpoint_round_trip(tmp_path):
    net = M.LGSleep(M.DESK, seed=9)
    x = np.random.default_rng(9).standard_normal((2, 19, 512, 1))
    opt = nn.Adam(net.params(), lr=1e-3)
    M.lg_sleep_loss(net, x, np.array([0, 1]))
    opt.step()
    path = tmp_path / "m.lgsw"
    M.save_checkpoint(path, net, opt, extra={"fold": 3})
    net2, opt2, extra = M.load_checkpoint(path)
    assert extra == {"fold": 3} and type(net2) is M.LGSleep and net2.cfg == M.DESK
    for k, v in net.state_dict().items():
        assert net2.state_dict()[k].tobytes() == v.tobytes()
    for k, v in opt.state().items():
        assert opt2.state()[k].tobytes() == v.tobytes()
    assert opt2.t == opt.t
    assert M.predict_proba(net2, x).tobytes() == M.predict_proba(net, x).tobytes()
