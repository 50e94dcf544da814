import numpy as np
import pytest
import torch

from clickforge import netcore
from clickforge.guidance import Click, render_disks
from clickforge.losses import normalized_focal_loss
from clickforge.netcore import (CheckpointError, ModelConfig, ParamSet,
                                adm_forward, backward, bsm_forward,
                                check_compatible, init_params, load_checkpoint,
                                param_shapes, partition, save_checkpoint,
                                zero_params)

CFG = ModelConfig()


def rand_inputs(rng, h, w):
    img = rng.random((h, w, 3)).astype(np.float32)
    clicks = [Click(int(rng.integers(h)), int(rng.integers(w)), "positive", 1),
              Click(int(rng.integers(h)), int(rng.integers(w)), "negative", 2)]
    return img, render_disks(clicks, h, w, radius=3)


class TestForwardContracts:
    def test_output_shapes_and_range(self):
        rng = np.random.default_rng(0)
        params = init_params(CFG, 0)
        for h, w in ((64, 64), (40, 24), (16, 16)):
            img, g = rand_inputs(rng, h, w)
            coarse, _t = bsm_forward(img, g, params, CFG)
            assert coarse.data.shape == (h, w)
            refined, _t = adm_forward(img, g, coarse, params, CFG)
            assert refined.data.shape == (h, w)
            for out in (coarse, refined):
                assert out.data.min() > 0.0 and out.data.max() < 1.0

    def test_zero_params_give_uniform_half(self):
        rng = np.random.default_rng(1)
        img, g = rand_inputs(rng, 16, 16)
        zp = zero_params(CFG)
        coarse, _ = bsm_forward(img, g, zp, CFG)
        assert np.allclose(coarse.data, 0.5)
        for coarse_input in (coarse, rng.random((16, 16))):
            refined, _ = adm_forward(img, g, coarse_input, zp, CFG)
            assert np.allclose(refined.data, 0.5)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        img, g = rand_inputs(rng, 32, 32)
        params = init_params(CFG, 3)
        a, _ = bsm_forward(img, g, params, CFG)
        b, _ = bsm_forward(img, g, params, CFG)
        assert np.array_equal(a.data, b.data)

    def test_forward_does_not_mutate_params(self):
        rng = np.random.default_rng(3)
        img, g = rand_inputs(rng, 16, 16)
        params = init_params(CFG, 4)
        before = params.snapshot_bytes()
        coarse, tape = bsm_forward(img, g, params, CFG)
        adm_forward(img, g, tape, params, CFG)
        assert params.snapshot_bytes() == before

    def test_adm_weight_perturbation_changes_output(self):
        rng = np.random.default_rng(4)
        img, g = rand_inputs(rng, 16, 16)
        params = init_params(CFG, 5).astype(torch.float64)
        coarse = rng.uniform(0.2, 0.8, (16, 16))
        base, _ = adm_forward(img, g, coarse, params, CFG)
        flat = params.get("adm.atrous1.weight").view(-1)
        sensitivities = []
        for idx in rng.integers(0, flat.numel(), size=5):
            orig = flat[int(idx)].item()
            flat[int(idx)] = orig + 1e-3
            bumped, _ = adm_forward(img, g, coarse, params, CFG)
            flat[int(idx)] = orig
            sensitivities.append(np.abs(bumped.data - base.data).max() / 1e-3)
        assert max(sensitivities) > 0.0

    def test_channel_mismatch_rejected(self):
        params = init_params(CFG, 0)
        with pytest.raises(ValueError, match="dimensions"):
            bsm_forward(np.zeros((16, 16, 3), dtype=np.float32),
                        render_disks([], 8, 8), params, CFG)


class TestPartition:
    def test_disjoint_and_covering(self):
        params = init_params(CFG, 0)
        bsm, adm = partition(params)
        assert set(bsm.names()) | set(adm.names()) == set(params.names())
        assert not set(bsm.names()) & set(adm.names())
        assert all(n.startswith("adm.") for n in adm.names())

    def test_construction_requires_tags(self):
        with pytest.raises(ValueError, match="tag"):
            ParamSet({"x": torch.zeros(2)}, {})
        with pytest.raises(ValueError, match="tag"):
            ParamSet({"x": torch.zeros(2)}, {"x": "OTHER"})

    def test_shapes_immutable(self):
        params = init_params(CFG, 0)
        with pytest.raises(ValueError, match="immutable"):
            params.set_("adm.head.bias", torch.zeros(7))


class TestBackward:
    def test_gradient_shapes_mirror_parameters(self):
        rng = np.random.default_rng(5)
        img, g = rand_inputs(rng, 16, 16)
        params = init_params(CFG, 6)
        coarse, tape = bsm_forward(img, g, params, CFG)
        grads = backward(tape, np.ones((16, 16)))
        for name, grad in grads.items():
            assert grad.shape == tuple(params.get(name).shape)

    def test_zero_upstream_gradient(self):
        rng = np.random.default_rng(6)
        img, g = rand_inputs(rng, 16, 16)
        params = init_params(CFG, 7)
        _, tape = bsm_forward(img, g, params, CFG)
        grads = backward(tape, np.zeros((16, 16)))
        assert all(np.all(v == 0) for v in grads.values())

    def test_mismatched_gradient_shape(self):
        rng = np.random.default_rng(7)
        img, g = rand_inputs(rng, 16, 16)
        params = init_params(CFG, 8)
        _, tape = bsm_forward(img, g, params, CFG)
        with pytest.raises(ValueError, match="does not match"):
            backward(tape, np.zeros((8, 8)))

    def test_consumed_tape_rejected(self):
        rng = np.random.default_rng(8)
        img, g = rand_inputs(rng, 16, 16)
        params = init_params(CFG, 9)
        _, tape = bsm_forward(img, g, params, CFG)
        backward(tape, np.ones((16, 16)))
        with pytest.raises(ValueError, match="consumed"):
            backward(tape, np.ones((16, 16)))

    def test_backbone_loss_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        img, g = rand_inputs(rng, 16, 16)
        params = init_params(CFG, 10).astype(torch.float64)
        y = (rng.random((16, 16)) > 0.5).astype(np.uint8)

        def loss():
            coarse, tape = bsm_forward(img, g, params, CFG)
            return coarse, tape

        coarse, tape = loss()
        _, dldp = normalized_focal_loss(coarse.data, y, 2.0, return_grad=True)
        grads = backward(tape, dldp)
        h = 1e-4
        for name in ("bsm.stem.weight", "bsm.dec1.weight", "bsm.head.bias"):
            flat = params.get(name).view(-1)
            for idx in rng.integers(0, flat.numel(), size=2):
                orig = flat[int(idx)].item()
                flat[int(idx)] = orig + h
                up = normalized_focal_loss(loss()[0].data, y, 2.0)
                flat[int(idx)] = orig - h
                down = normalized_focal_loss(loss()[0].data, y, 2.0)
                flat[int(idx)] = orig
                fd = (up - down) / (2 * h)
                an = grads[name].ravel()[int(idx)]
                assert abs(fd - an) / max(abs(fd), abs(an), 1e-7) < 1e-3


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params(CFG, 11)
        path = tmp_path / "model.cfck"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path, CFG)
        assert loaded.snapshot_bytes() == params.snapshot_bytes()
        assert all(loaded.tag(n) == params.tag(n) for n in params.names())

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.cfck"
        save_checkpoint(init_params(CFG, 0), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "model.cfck"
        save_checkpoint(init_params(CFG, 0), path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_corrupted_payload(self, tmp_path):
        path = tmp_path / "model.cfck"
        save_checkpoint(init_params(CFG, 0), path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="CRC"):
            load_checkpoint(path)

    def test_config_mismatch_names_tensor(self, tmp_path):
        path = tmp_path / "model.cfck"
        save_checkpoint(init_params(CFG, 0), path)
        other = ModelConfig(adm_width=24)
        with pytest.raises(CheckpointError, match="adm\\."):
            load_checkpoint(path, other)

    def test_non_float32_rejected(self, tmp_path):
        params = init_params(CFG, 0).astype(torch.float64)
        with pytest.raises(TypeError, match="float32"):
            save_checkpoint(params, tmp_path / "m.cfck")


class TestModelConfig:
    def test_dilations_must_increase(self):
        with pytest.raises(ValueError, match="increasing"):
            ModelConfig(adm_dilations=(2, 2, 8))

    def test_width_floor(self):
        with pytest.raises(ValueError, match=">= 4"):
            ModelConfig(bsm_base_width=2)

    def test_param_shapes_cover_both_partitions(self):
        shapes = param_shapes(CFG)
        tags = {tag for _s, tag in shapes.values()}
        assert tags == {"BSM", "ADM"}

    def test_check_compatible_passes_for_matching(self):
        check_compatible(init_params(CFG, 0), CFG)
