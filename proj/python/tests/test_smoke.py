# Copyright 2026 The BPLF Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import hashlib
import math
import struct

import numpy as np
import pytest

import bplf


def blobs(count, seed, side=8):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side]
    out = np.empty((count, 1, side, side), dtype=np.float32)
    for i in range(count):
        cy, cx = rng.uniform(2, side - 2, size=2)
        peak = rng.uniform(120, 250)
        out[i, 0] = np.round(peak * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 6.0))
    return out


def gaussian_log_density(parts):
    total = 0.0
    for p in parts:
        total += float(np.sum(-0.5 * p.astype(np.float64) ** 2 - 0.5 * math.log(2 * math.pi), axis=(1, 2, 3))[0])
    return total


def test_bits_per_dim_matches_formula():
    for ll, d in [(0.0, 1), (-1000.0, 1024), (123.4, 3072)]:
        expected = -(ll / d - math.log(128.0)) / math.log(2.0)
        assert bplf.bits_per_dim(ll, d) == pytest.approx(expected, abs=1e-12)


def test_pixels_survive_eval_quantization():
    pixels = np.arange(256, dtype=np.float32).reshape(1, 16, 16)
    x = bplf.to_model_input(pixels, train=False)
    np.testing.assert_allclose(x, (pixels + 0.5 - 128.0) / 128.0, atol=1e-7)
    assert list(bplf.to_image(x)) == list(range(256))


def test_sha256_agrees_with_hashlib():
    for payload in [b"", b"abc", bytes(range(256)) * 7]:
        assert bplf.sha256_hex(payload) == hashlib.sha256(payload).hexdigest()


def test_idx_file_bytes_and_checksum(tmp_path):
    pixels = np.random.default_rng(1).integers(0, 256, size=(3, 1, 5, 4)).astype(np.float32)
    path = tmp_path / "images"
    bplf.write_idx_images(str(path), pixels)
    expected = struct.pack(">BBBBIII", 0, 0, 8, 3, 3, 5, 4) + pixels.astype(np.uint8).tobytes()
    written = path.read_bytes()
    assert hashlib.sha256(written).hexdigest() == hashlib.sha256(expected).hexdigest()
    np.testing.assert_array_equal(bplf.read_idx_images(str(path)), pixels)


def test_singular_values_match_numpy():
    m = np.random.default_rng(2).normal(size=(9, 6))
    np.testing.assert_allclose(bplf.singular_values(m), np.linalg.svd(m, compute_uv=False), atol=1e-10)


def test_svd_truncation_matches_numpy_rank_k():
    img = np.random.default_rng(3).uniform(0, 1, size=(1, 12, 12)).astype(np.float32)
    u, s, vt = np.linalg.svd(img[0].astype(np.float64))
    rank2 = (u[:, :2] * s[:2]) @ vt[:2]
    np.testing.assert_allclose(bplf.svd_truncate(img, "rank:2")[0], rank2, atol=1e-5)


def test_log_likelihood_is_prior_plus_log_det_and_inverts():
    model = bplf.Model(height=8, width=8, levels=2, depth=2, hidden=8, seed=4)
    x = bplf.to_model_input(blobs(1, 5)[0], train=False)[None]
    parts, log_det = model.encode(x)
    assert sum(p.size for p in parts) == 64
    ll = model.log_likelihood(x)
    assert ll[0] == pytest.approx(gaussian_log_density(parts) + float(log_det[0]), abs=1e-3)
    np.testing.assert_allclose(model.decode(parts), x, atol=1e-4)


def test_training_lowers_nll_and_checkpoint_round_trips(tmp_path):
    data = blobs(32, 6)
    model = bplf.Model(height=8, width=8, levels=1, depth=1, hidden=8, seed=7)
    rows = model.train(data, epochs=3, batch_size=8, seed=1)
    assert [r.epoch for r in rows] == [0, 1, 2, 3]
    assert rows[-1].nll_nats < rows[0].nll_nats
    nll, bpd = model.evaluate(data)
    assert bpd == pytest.approx(bplf.bits_per_dim(-nll, 64), abs=1e-9)

    model.save(str(tmp_path / "ckpt"))
    loaded = bplf.Model.load(str(tmp_path / "ckpt"))
    x = bplf.to_model_input(data[0], train=False)[None]
    assert abs(float(model.log_likelihood(x)[0]) - float(loaded.log_likelihood(x)[0])) < 1e-6


def test_conditional_sampling_and_label_errors():
    model = bplf.Model(height=8, width=8, levels=1, depth=1, hidden=4, num_classes=3, seed=8)
    samples = model.sample(4, label=2, temperature=0.7, seed=3)
    assert len(samples) == 4 and samples[0].shape == (1, 8, 8)
    with pytest.raises(ValueError):
        model.sample(1, label=5)
    with pytest.raises(ValueError):
        bplf.Model(height=12, width=12, levels=3)


def test_self_checks_pass():
    results = bplf.run_checks(seed=0, deep=False)
    assert results and all(r.passed for r in results), [(r.name, r.detail) for r in results if not r.passed]
