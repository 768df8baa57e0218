import pytest
import torch

from spikegate.errors import ValidationError
from spikegate.surrogate import SurrogateShape, heaviside, soft_gate, spike_backward


def _t(v):
    return torch.tensor(v, dtype=torch.float64)


@pytest.mark.parametrize("kind,a,x,want", [
    ("rectangular", 0.5, 0.0, 1.0),
    ("rectangular", 0.5, 0.6, 0.0),
    ("rectangular", 0.5, -0.5, 1.0),
    ("fast-sigmoid", 1.0, 1.0, 0.25),
    ("fast-sigmoid", 0.5, 0.0, 2.0),
])
def test_pseudo_derivative_values(kind, a, x, want):
    assert float(spike_backward(_t(x), SurrogateShape(kind, a))) == pytest.approx(want, abs=1e-15)


@pytest.mark.parametrize("kind", ["rectangular", "fast-sigmoid"])
def test_pseudo_derivative_shape(kind):
    shape = SurrogateShape(kind, 0.7)
    x = torch.linspace(-5, 5, 1001, dtype=torch.float64)
    d = spike_backward(x, shape)
    assert float(d[500]) == float(d.max())
    assert torch.equal(d, d.flip(0))
    assert float(d[0]) < 0.05 * float(d[500])


def test_forward_is_exact_step():
    x = _t([-1e-12, 0.0, 1e-12, 3.0]).requires_grad_()
    y = heaviside(x, SurrogateShape())
    assert y.tolist() == [0.0, 1.0, 1.0, 1.0]
    y.sum().backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0, 0.0]


@pytest.mark.parametrize("kind", ["rectangular", "fast-sigmoid"])
def test_soft_gate_derivative_is_surrogate(kind):
    shape = SurrogateShape(kind, 0.4)
    x = torch.linspace(-2, 2, 97, dtype=torch.float64)
    h = 1e-6
    fd = (soft_gate(x + h, shape) - soft_gate(x - h, shape)) / (2 * h)
    keep = (x.abs() - shape.width).abs() > 1e-3  # rectangular kinks
    assert torch.allclose(fd[keep], spike_backward(x, shape)[keep], atol=1e-6)
    assert float(soft_gate(_t(0.0), shape)) == 0.5


@pytest.mark.parametrize("kind,a", [("triangle", 1.0), ("rectangular", 0.0), ("fast-sigmoid", -1.0)])
def test_invalid_spec(kind, a):
    with pytest.raises(ValidationError):
        SurrogateShape(kind, a)
