import math

import numpy as np
import pytest
import torch

from taprop.relation import RelationNet, RelationNets, RelationOverflow, inverse_softplus, positive_scale


def test_sigma_floor_at_zero_input():
    assert positive_scale(torch.tensor([0.0], dtype=torch.float64)).item() == pytest.approx(math.log(2) + 1e-6, abs=1e-12)
    assert positive_scale(torch.tensor([-1e4])).item() == pytest.approx(1e-6, rel=1e-6)


def test_inverse_softplus_roundtrip():
    for y in (1e-3, 0.5, 3.0, 40.0):
        assert torch.nn.functional.softplus(torch.tensor(inverse_softplus(y), dtype=torch.float64)).item() == pytest.approx(y)


@pytest.mark.parametrize("shape", [(64, 21, 21), (64, 10, 10), (64, 5, 5), (64, 1, 1)])
def test_one_positive_scalar_per_node(shape):
    net = RelationNet(shape)
    sigma = net(torch.randn(7, *shape))
    assert sigma.shape == (7,)
    assert (sigma > 0).all()


def test_initial_scale_matches_tap_width():
    net = RelationNet((64, 5, 5))
    with torch.no_grad():
        net.fc2.weight.zero_()
    sigma = net(torch.randn(3, 64, 5, 5))
    assert torch.allclose(sigma, torch.full((3,), 40.0 + 1e-6), rtol=1e-5)


def test_nets_are_independent():
    nets = RelationNets({2: (64, 5, 5), 3: (64, 5, 5)})
    a, b = nets.nets["2"], nets.nets["3"]
    assert not torch.equal(a.fc1.weight, b.fc1.weight)
    assert all(p1.data_ptr() != p2.data_ptr() for p1, p2 in zip(a.parameters(), b.parameters()))


def test_overflow_reported_with_layer():
    nets = RelationNets({3: (4, 2, 2)}, channels=(4, 1))
    with torch.no_grad():
        nets.nets["3"].fc2.bias.fill_(float("nan"))
    with pytest.raises(RelationOverflow, match="layer 3"):
        nets({3: torch.randn(2, 4, 2, 2)})


def test_sigma_gradient_finite_difference():
    torch.manual_seed(1)
    net = RelationNet((4, 4, 4), channels=(4, 1)).double().train()
    x = torch.randn(5, 4, 4, 4, dtype=torch.float64)
    coef = torch.randn(5, dtype=torch.float64)
    f = lambda: (net(x) * coef).sum()
    net.zero_grad()
    f().backward()
    rng = np.random.default_rng(1)
    params = list(net.parameters())
    for _ in range(20):
        p = params[rng.integers(len(params))]
        j = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + 1e-6
            up = f().item()
            flat[j] = old - 1e-6
            dn = f().item()
            flat[j] = old
        num, ana = (up - dn) / 2e-6, p.grad.view(-1)[j].item()
        assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-3)
