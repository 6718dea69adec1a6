import numpy as np
import pytest

from prompt_adapt import ckpt
from prompt_adapt import classifier as clf
from prompt_adapt.tensor import Tape, Tensor, backward, log_softmax, soft_cross_entropy


def test_output_shapes():
    m = clf.build_default(10, (3, 32, 32))
    assert m.forward(np.zeros((4, 3, 32, 32))).shape == (4, 10)
    small = clf.build_default(2, (1, 16, 16))
    assert small.forward(np.zeros((3, 1, 16, 16))).shape == (3, 2)


def test_param_count_by_hand():
    conv1 = 8 * 3 * 3 * 3 + 8
    conv2 = 16 * 8 * 3 * 3 + 16
    flat = 16 * 15 * 15
    fc1 = flat * 64 + 64
    fc2 = 64 * 10 + 10
    assert clf.build_default(10, (3, 32, 32)).param_count() == conv1 + conv2 + fc1 + fc2 == 232506


def test_rejects_single_class():
    with pytest.raises(ValueError):
        clf.build_default(1)


def test_train_loss_decreases(glyphs):
    m = clf.build_default(10, seed=1)
    curve = clf.train_source(m, glyphs.images[:200], glyphs.labels[:200], clf.TrainConfig(epochs=3, batch_size=50))
    assert curve[-1] < curve[0]


def test_lr_zero_gives_constant_curve(glyphs):
    m = clf.build_default(10, seed=1)
    before = m.checksum()
    curve = clf.train_source(m, glyphs.images[:100], glyphs.labels[:100], clf.TrainConfig(epochs=3, lr=0.0, batch_size=100))
    assert curve[0] == curve[1] == curve[2]
    assert m.checksum() == before


def test_training_is_deterministic(glyphs):
    cfg = clf.TrainConfig(epochs=2, batch_size=50, seed=3)
    a, b = clf.build_default(10, seed=1), clf.build_default(10, seed=1)
    ca = clf.train_source(a, glyphs.images[:100], glyphs.labels[:100], cfg)
    cb = clf.train_source(b, glyphs.images[:100], glyphs.labels[:100], cfg)
    assert ca == cb
    assert a.checksum() == b.checksum()


def test_train_errors(glyphs):
    m = clf.build_default(10)
    with pytest.raises(ValueError, match="empty"):
        clf.train_source(m, glyphs.images[:0], glyphs.labels[:0])
    with pytest.raises(ValueError, match="labels"):
        clf.train_source(m, glyphs.images[:2], np.array([0, 10]))
    with pytest.raises(ValueError):
        clf.TrainConfig(epochs=0)
    with pytest.raises(clf.FrozenError):
        clf.train_source(m.freeze(), glyphs.images[:2], glyphs.labels[:2])


def test_freeze_makes_weights_read_only(small_model):
    with pytest.raises(ValueError):
        small_model.params["fc2.b"][0] = 1.0


def test_predict_same_before_and_after_freeze(glyphs):
    m = clf.build_default(10, seed=2)
    p1, _ = m.predict(glyphs.images[:8])
    m.freeze()
    p2, _ = m.predict(glyphs.images[:8])
    assert np.array_equal(p1, p2)


def test_backward_through_frozen_model_sees_prompt_leaves_only(small_model, glyphs):
    tape = Tape()
    x = tape.leaf(glyphs.images[:4], "prompt")
    loss = soft_cross_entropy(clf.one_hot(glyphs.labels[:4], 10), log_softmax(small_model.forward(x)))
    grads = backward(loss)
    assert list(grads) == [x.node]
    assert [n.saved["name"] for n in tape.nodes if n.kind == "leaf"] == ["prompt"]


def test_predict_contract(small_model, glyphs):
    probs, conf = small_model.predict(glyphs.images[:100])
    assert probs.shape == (100, 10) and conf.shape == (100,)
    assert np.abs(probs.sum(axis=1) - 1).max() <= 1e-9
    again, _ = small_model.predict(glyphs.images[:100])
    assert np.array_equal(probs, again)


def test_uniform_logits_give_confidence_one_over_c():
    m = clf.build_default(4, (1, 8, 8))
    for k in ("fc2.w", "fc2.b"):
        m.params[k][...] = 0.0
    _, conf = m.predict(np.random.default_rng(0).random((3, 1, 8, 8)))
    assert np.allclose(conf, 0.25, atol=1e-15)


def test_geometry_mismatch(small_model):
    with pytest.raises(ValueError, match="geometry"):
        small_model.predict(np.zeros((1, 3, 16, 16)))


def test_save_load_round_trip(small_model, glyphs, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    raw = clf.save(small_model, a)
    m2 = clf.load(a)
    assert clf.save(m2, b) == raw == b.read_bytes()
    assert m2.frozen and m2.checksum() == small_model.checksum()
    p1, _ = small_model.predict(glyphs.images[:10])
    p2, _ = m2.predict(glyphs.images[:10])
    assert np.array_equal(p1, p2)


def test_load_errors(small_model, tmp_path):
    path = tmp_path / "m.ckpt"
    raw = clf.save(small_model, path)
    path.write_bytes(raw[:1000])
    with pytest.raises(ckpt.CheckpointError):
        clf.load(path)
    clf.save(small_model, path)
    with pytest.raises(ckpt.CheckpointError, match="geometry"):
        clf.load(path, geometry=(1, 32, 32))
    ckpt.write(path, {"kind": "classifier", "version": 9}, {})
    with pytest.raises(ckpt.CheckpointError, match="version"):
        clf.load(path)


def test_one_hot():
    assert np.array_equal(clf.one_hot([1, 0], 3), [[0, 1, 0], [1, 0, 0]])


def test_forward_accepts_tensor(small_model, glyphs):
    a = small_model.forward(Tensor(glyphs.images[:2])).data
    b = small_model.forward(glyphs.images[:2]).data
    assert np.array_equal(a, b)
