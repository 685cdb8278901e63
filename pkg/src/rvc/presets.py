"""Shipped case studies, sized to solve on a laptop.

``taxiing`` is a runway-keeping aircraft steered by a saturating
tan-proportional law; its error boxes come from a fixed ladder that widens
from nothing to a box large enough to break the stock gains.  ``rover``
threads two circular keep-outs with a gridded steering table planned by a
short-lookahead candidate search (optionally distilled into a small net);
its perception error grows linearly with time spent dark and resets when
the lights fire.

Defaults keep solve times CI-friendly; ``full=True`` restores the fine
grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import build_bounds_field
from .grid import Grid
from .hamiltonian import (
    ExactEnumerated,
    ExactTanProportional,
    IntervalBounded,
    dissipation_coeffs,
)
from .models import (
    ClosedLoopModel,
    Dubins3D,
    ErrorBound,
    Mlp,
    Tabulated,
    TanProportional,
)
from .solver import CircularObstacles, SlabKeepout, SolveConfig

# (crosstrack, heading) error half-widths, narrow to wide; rung 0 is the
# uncertainty-free baseline and the top rung defeats the stock gains
ERROR_LADDER = (
    (0.0, 0.0),
    (0.5, 0.02),
    (1.0, 0.05),
    (2.5, 0.15),
    (10.0, 0.49),
)

ROVER_KEEPOUTS = CircularObstacles(centers=((8.0, 1.5), (14.0, -2.0)),
                                   radii=(1.5, 2.0))
ROVER_GOAL = (19.0, 0.0)
ROVER_RATES = (0.1, 0.1, 0.02)


@dataclass(frozen=True)
class CaseStudy:
    """Everything a solve needs, bundled: who moves, what kills it, where
    it starts, and the solver configuration."""

    name: str
    model: ClosedLoopModel
    failure: object
    config: SolveConfig
    start: np.ndarray

    @property
    def grid(self) -> Grid:
        return self.config.grid


def taxiing(rung: int = 0, full: bool = False) -> CaseStudy:
    """Runway keeping: stay within 10 m of the centerline for 20 s.

    ``rung`` indexes ERROR_LADDER.  Every rung solves with the widest
    rung's dissipation coefficients, so the whole family shares one time
    step and the stored fields nest exactly instead of to O(dt).
    """
    if not 0 <= rung < len(ERROR_LADDER):
        raise ValueError(f"rung must be in [0, {len(ERROR_LADDER)}), got {rung}")
    n = 101 if full else 61
    g = Grid(lo=[-11.0, 100.0, -0.49], hi=[11.0, 250.0, 0.49],
             shape=[n, n, n], periodic=[False, False, False])
    gains = TanProportional(a=-0.013, b=-0.44)

    def with_box(r):
        e_px, e_th = ERROR_LADDER[r]
        return ClosedLoopModel(dynamics=Dubins3D(v=5.0), controller=gains,
                               error=ErrorBound.static([e_px, 0.0, e_th]))

    model = with_box(rung)
    widest = with_box(len(ERROR_LADDER) - 1)
    cfg = SolveConfig(
        grid=g, hamiltonian=ExactTanProportional(model=model),
        t0=0.0, T=20.0,
        alphas_override=dissipation_coeffs(ExactTanProportional(model=widest), g))
    return CaseStudy(name=f"taxiing-rung{rung}", model=model,
                     failure=SlabKeepout(dim=0, magnitude=10.0),
                     config=cfg, start=np.array([0.0, 100.0, 0.0]))


def rover(controller: str = "table", lights_on: bool = False,
          full: bool = False) -> CaseStudy:
    """Obstacle threading: avoid two discs for 5 s at 1 m/s.

    ``lights_on`` pins the error box at zero (the estimate is re-anchored
    continuously); otherwise the box grows at ROVER_RATES per second of
    darkness.  ``controller`` picks the raw steering table or the net
    fitted to it.
    """
    n, nt = (100, 100) if full else (61, 51)
    g = Grid(lo=[0.0, -5.0, -np.pi], hi=[20.0, 5.0, np.pi],
             shape=[n, n, n], periodic=[False, False, True])
    table = rover_steering_table(g)
    if controller == "table":
        ctrl = table
    elif controller == "mlp":
        ctrl = fit_steering_mlp(table)
    else:
        raise ValueError(f"controller must be 'table' or 'mlp', got {controller!r}")
    error = (ErrorBound.static([0.0, 0.0, 0.0]) if lights_on
             else ErrorBound.linear_growth(ROVER_RATES))
    model = ClosedLoopModel(dynamics=Dubins3D(v=1.0), controller=ctrl,
                            error=error)
    horizon = 5.0
    if isinstance(ctrl, Tabulated):
        spec = ExactEnumerated(model=model)
    else:
        tp = None if error.is_static else np.linspace(0.0, horizon, nt)
        spec = IntervalBounded(dynamics=model.dynamics,
                               bounds=build_bounds_field(model, g, tprimes=tp))
    cfg = SolveConfig(grid=g, hamiltonian=spec, t0=0.0, T=horizon,
                      dark_time_samples=nt)
    return CaseStudy(name=f"rover-{controller}", model=model,
                     failure=ROVER_KEEPOUTS, config=cfg,
                     start=np.array([1.0, 0.0, 0.5 * np.pi]))


def rover_steering_table(grid: Grid,
                         keepouts: CircularObstacles = ROVER_KEEPOUTS,
                         goal=ROVER_GOAL, v: float = 1.0, turn_rates=None,
                         lookahead: float = 1.5, dt: float = 0.1,
                         clearance: float = 0.3) -> Tabulated:
    """Plan one constant turn rate per node by short-lookahead search.

    Each candidate rate is rolled out with Euler steps; its score is the
    final distance to the goal plus a stiff penalty for dipping inside the
    keep-out clearance on the way.  Lowest score wins, the most negative
    rate taking ties, so rebuilding the table is byte-stable.
    """
    if turn_rates is None:
        turn_rates = np.linspace(-1.0, 1.0, 21)
    turn_rates = np.asarray(turn_rates, dtype=np.float64)
    mesh = np.meshgrid(*[grid.axis(d) for d in range(grid.ndim)], indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    n_steps = max(1, int(round(lookahead / dt)))

    def margin(x, y):
        best = np.full(x.shape, np.inf)
        for (cx, cy), rad in zip(keepouts.centers, keepouts.radii):
            best = np.minimum(best, np.hypot(x - cx, y - cy) - rad)
        return best

    best_cost = np.full(len(nodes), np.inf)
    best_rate = np.zeros(len(nodes))
    for rate in turn_rates:
        x = nodes[:, 0].copy()
        y = nodes[:, 1].copy()
        th = nodes[:, 2].copy()
        worst = margin(x, y)
        for _ in range(n_steps):
            x = x + dt * v * np.sin(th)
            y = y + dt * v * np.cos(th)
            th = th + dt * rate
            worst = np.minimum(worst, margin(x, y))
        cost = np.hypot(x - goal[0], y - goal[1]) \
            + 100.0 * np.maximum(clearance - worst, 0.0)
        better = cost < best_cost
        best_rate = np.where(better, rate, best_rate)
        best_cost = np.minimum(best_cost, cost)
    lim = float(np.max(np.abs(turn_rates)))
    return Tabulated(grid=grid, table=best_rate.reshape(tuple(grid.shape)),
                     control_lo=[-lim], control_hi=[lim])


def fit_steering_mlp(table: Tabulated, seed: int = 0, hidden: int = 32,
                     steps: int = 600, lr: float = 1e-2,
                     stride: int = 2) -> Mlp:
    """Fit a small tanh net to a steering table by full-batch Adam.

    Training runs on whitened inputs; the whitening is folded back into the
    first layer afterwards so the returned net consumes raw states like any
    other controller.  The fixed seed keeps refits byte-identical.
    """
    g = table.grid
    sub = tuple(slice(None, None, stride) for _ in range(g.ndim))
    mesh = np.meshgrid(*[g.axis(d)[::stride] for d in range(g.ndim)],
                       indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    Y = table.table[sub].reshape(len(X), -1)
    center = 0.5 * (g.hi + g.lo)
    scale = 0.5 * (g.hi - g.lo)
    Xn = (X - center) / scale

    rng = np.random.default_rng(seed)
    dims = (g.ndim, hidden, hidden, Y.shape[1])
    Ws = [rng.normal(0.0, dims[k] ** -0.5, size=(dims[k + 1], dims[k]))
          for k in range(3)]
    bs = [np.zeros(dims[k + 1]) for k in range(3)]
    params = [*Ws, *bs]
    mom = [np.zeros_like(p) for p in params]
    vel = [np.zeros_like(p) for p in params]
    for it in range(1, steps + 1):
        h1 = np.tanh(Xn @ Ws[0].T + bs[0])
        h2 = np.tanh(h1 @ Ws[1].T + bs[1])
        out = h2 @ Ws[2].T + bs[2]
        g2 = (out - Y) / len(X)  # d(mean squared error)/2 w.r.t. out
        g1 = (g2 @ Ws[2]) * (1.0 - h2 * h2)
        g0 = (g1 @ Ws[1]) * (1.0 - h1 * h1)
        grads = [g0.T @ Xn, g1.T @ h1, g2.T @ h2,
                 g0.sum(0), g1.sum(0), g2.sum(0)]
        for p, dp, m, v in zip(params, grads, mom, vel):
            m *= 0.9
            m += 0.1 * dp
            v *= 0.999
            v += 0.001 * dp * dp
            step = m / (1.0 - 0.9 ** it)
            step /= np.sqrt(v / (1.0 - 0.999 ** it)) + 1e-8
            p -= lr * step
    W0 = Ws[0] / scale  # fold the whitening into the first affine map
    b0 = bs[0] - Ws[0] @ (center / scale)
    return Mlp(layers=((W0, b0, "tanh"), (Ws[1], bs[1], "tanh"),
                       (Ws[2], bs[2], None)))
