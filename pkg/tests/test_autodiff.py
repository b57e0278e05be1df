import struct

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from mtse import autodiff
from mtse.errors import ContractError, NumericError, ShapeError


def parse_checkpoint(data: bytes):
    """Independent reader for the documented container layout."""
    assert data[:4] == b"MTSE"
    version, count = struct.unpack("<II", data[4:12])
    pos, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack("<I", data[pos : pos + 4])
        name = data[pos + 4 : pos + 4 + n].decode()
        pos += 4 + n
        (rank,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        dims = [struct.unpack("<Q", data[pos + 8 * i : pos + 8 * i + 8])[0] for i in range(rank)]
        pos += 8 * rank
        size = int(np.prod(dims)) if dims else 1
        vals = struct.unpack(f"<{size}f", data[pos : pos + 4 * size])
        pos += 4 * size
        out[name] = np.array(vals, dtype=np.float32).reshape(dims)
    assert pos == len(data)
    return version, out


class TestPrimitives:
    def test_add(self):
        assert torch.equal(torch.tensor([1.0, 2.0]) + torch.tensor([3.0, 4.0]), torch.tensor([4.0, 6.0]))

    def test_matmul_identity(self, rng):
        a = torch.tensor(rng.normal(size=(3, 4)))
        assert torch.equal(torch.eye(3, dtype=a.dtype) @ a, a)

    def test_conv_all_ones(self, rng):
        x = torch.tensor(rng.normal(size=(1, 1, 3, 3)))
        y = F.conv2d(x, torch.ones(1, 1, 3, 3, dtype=x.dtype))
        assert y.shape == (1, 1, 1, 1)
        assert float(y) == pytest.approx(float(x.sum()))


class TestBackward:
    def test_square(self):
        x = torch.tensor([1.0, 2.0, 3.0], requires_grad=True)
        autodiff.backward((x**2).sum())
        assert torch.equal(x.grad, torch.tensor([2.0, 4.0, 6.0]))

    def test_linear_column_sums(self, f64, rng):
        a = torch.tensor(rng.normal(size=(4, 3)))
        x = torch.zeros(3, requires_grad=True)
        autodiff.backward((a @ x).sum())
        assert torch.allclose(x.grad, a.sum(0))

    def test_non_scalar(self):
        x = torch.ones(3, requires_grad=True)
        with pytest.raises(ContractError):
            autodiff.backward(x * 2)

    def test_accumulation_doubles(self, f64, rng):
        x = torch.tensor(rng.normal(size=5), requires_grad=True)
        autodiff.backward(torch.sin(x).sum())
        once = x.grad.clone()
        autodiff.backward(torch.sin(x).sum())
        assert torch.allclose(x.grad, 2 * once)

    def test_frozen_leaf_untouched(self):
        lin = torch.nn.Linear(3, 2)
        autodiff.freeze(lin)
        x = torch.ones(1, 3, requires_grad=True)
        autodiff.backward(lin(x).sum())
        assert lin.weight.grad is None and lin.bias.grad is None
        assert x.grad is not None
        assert autodiff.trainable(lin) == []

    def test_determinism(self):
        def run():
            torch.manual_seed(0)
            lin = torch.nn.Linear(8, 8)
            x = torch.randn(4, 8)
            autodiff.backward(torch.tanh(lin(x)).pow(2).mean())
            return lin.weight.grad.clone()

        assert torch.equal(run(), run())


class TestGradCheck:
    def test_sigmoid(self, f64, rng):
        x = torch.tensor(rng.normal(size=10))
        assert autodiff.grad_check(lambda t: torch.sigmoid(t).sum(), x) < 1e-6

    def test_linear_exact(self, f64, rng):
        w = torch.tensor(rng.normal(size=6))
        assert autodiff.grad_check(lambda t: (w * t).sum(), torch.tensor(rng.normal(size=6))) < 1e-9

    def test_restores_input(self, f64):
        x = torch.tensor([0.3, -0.2])
        before = x.clone()
        autodiff.grad_check(lambda t: (t**3).sum(), x)
        assert torch.equal(x, before)

    def test_detects_wrong_gradient(self, f64):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x**2

            @staticmethod
            def backward(ctx, g):
                return g  # wrong on purpose

        assert autodiff.grad_check(lambda t: Bad.apply(t).sum(), torch.tensor([1.5, 2.0])) > 0.1

    def test_non_finite(self, f64):
        with pytest.raises(NumericError):
            autodiff.grad_check(lambda t: torch.log(t).sum(), torch.tensor([0.0, 1.0]))

    def test_non_finite_input(self):
        with pytest.raises(NumericError):
            autodiff.grad_check(lambda t: t.sum(), torch.tensor([float("nan")]))

    def test_parameter_closure(self, f64, rng):
        lin = torch.nn.Linear(3, 2).double()
        x = torch.tensor(rng.normal(size=(4, 3)))
        assert autodiff.grad_check(lambda _: torch.tanh(lin(x)).sum(), lin.weight) < 1e-6


class TestOptimizer:
    def test_adam_defaults(self):
        opt = autodiff.make_optimizer([torch.nn.Parameter(torch.zeros(2))], 1e-3)
        g = opt.param_groups[0]
        assert isinstance(opt, torch.optim.Adam)
        assert g["betas"] == (0.9, 0.999) and g["eps"] == 1e-8 and g["lr"] == 1e-3

    def test_grad_norm(self):
        p = torch.nn.Parameter(torch.zeros(2))
        p.grad = torch.tensor([3.0, 4.0])
        assert autodiff.grad_norm([p]) == pytest.approx(5.0)


class TestCheckpoint:
    def test_layout_matches_independent_reader(self, rng):
        tensors = {"a.w": torch.tensor(rng.normal(size=(2, 3)), dtype=torch.float32),
                   "scalar": torch.tensor(1.5), "ü": torch.arange(4.0)}
        data = autodiff.dumps_tensors(tensors)
        version, parsed = parse_checkpoint(data)
        assert version == 1
        assert list(parsed) == list(tensors)
        for k, v in tensors.items():
            assert np.array_equal(parsed[k], v.numpy())

    def test_bit_exact_roundtrip(self, tmp_path, rng):
        tensors = {"x": torch.tensor(rng.normal(size=(3, 4, 5)), dtype=torch.float32)}
        p = autodiff.save_tensors(tmp_path / "c.mtse", tensors)
        back = autodiff.load_tensors(p)
        assert back["x"].numpy().tobytes() == tensors["x"].numpy().tobytes()
        assert autodiff.dumps_tensors(back) == p.read_bytes()

    def test_bad_magic(self):
        with pytest.raises(ShapeError):
            autodiff.loads_tensors(b"NOPE" + bytes(8))

    def test_truncated(self):
        data = autodiff.dumps_tensors({"x": torch.ones(10)})
        with pytest.raises(ShapeError):
            autodiff.loads_tensors(data[:-3])

    def test_module_roundtrip_and_mismatch(self, tmp_path):
        a, b = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
        autodiff.save_module(tmp_path / "m.mtse", a)
        autodiff.load_module(tmp_path / "m.mtse", b)
        assert autodiff.checksum(a) == autodiff.checksum(b)
        with pytest.raises(ShapeError):
            autodiff.load_module(tmp_path / "m.mtse", torch.nn.Linear(3, 2, bias=False))
