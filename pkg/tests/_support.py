"""Random problem instances shared by the test modules."""
import numpy as np

from mpcnet import losses, model
from mpcnet.policy import MenConfig, MenPolicy, men_forward


def random_policy(rng, num_experts=4, scale=0.3) -> MenPolicy:
    pol = MenPolicy(MenConfig(num_experts=num_experts, seed=int(rng.integers(1 << 31))))
    for v in pol.params.values():
        v += rng.normal(0.0, scale, v.shape)
    pol.version += 1
    return pol


def random_tuple(rng):
    """A replay-tuple-like record with a random mode, costate and multipliers."""
    mode = model.Mode(int(rng.integers(model.NUM_MODES)))
    rows = model.mode_constraints(mode)[0].shape[0]

    class T:
        pass

    t = T()
    t.gt = np.concatenate([rng.uniform(0, 1, 2), rng.uniform(0, 4, 2), rng.uniform(0, 1, 2)])
    t.xr = rng.normal(0.0, 0.05, 6)
    t.x_abs = model.default_state() + t.xr
    t.t_abs = float(rng.uniform(0, 4))
    t.dVdx = rng.normal(0.0, 5.0, 6)
    t.dVdt = float(rng.normal(0.0, 5.0))
    t.nu = rng.normal(0.0, 0.5, rows)
    t.mode = mode
    t.mode_probs = np.eye(model.NUM_MODES)[int(mode)]
    t.u_mpc = model.hover_input(mode) + rng.normal(0.0, 2.0, 6)
    return t


def directional_check(kind, policy, batch, rng, cost=None, eps=1e-6):
    """Relative error between analytic and central-difference directional derivatives of the batch loss."""
    cost = cost or model.walker_cost()
    policy.zero_grad()
    losses.batch_loss(kind, batch, policy, cost)
    g = policy.flat_gradients()
    theta = policy.flat_parameters()
    d = rng.normal(size=theta.size)
    d /= np.linalg.norm(d)

    def J(th):
        policy.set_flat_parameters(th)
        return losses.batch_loss(kind, batch, policy, cost, accumulate=False)[0]

    fd = (J(theta + eps * d) - J(theta - eps * d)) / (2 * eps)
    policy.set_flat_parameters(theta)
    policy.zero_grad()
    an = g @ d
    return abs(fd - an) / max(abs(fd), abs(an), 1e-8)
