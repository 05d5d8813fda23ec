"""Command line front end.

Subcommands::

    run               --config PATH
    check-derivative  --config PATH --t FLOAT --n INT
    sigma-sweep       --config PATH --sigmas 1,10,100

The configuration is a flat ``key = value`` file, one pair per line, with
``#`` starting a comment.  Shapes are lists of discs ``x y r`` separated by
``;``.  A relative ``output_dir`` is taken relative to the config file.

Exit codes: ``run`` 0 on a completed run, 2 when it ends without any
accepted step, 1 on configuration or I/O errors.  ``check-derivative`` 0
when every relative error is at most 1e-2, 4 otherwise, 3 if the finite
difference deformation is invalid.  ``sigma-sweep`` 1 on an empty list.
"""
from __future__ import annotations

import argparse
import colorsys
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gradients import ConfigError, GradientMethod, parse_kind
from .kernels import Profile, RadialKernel, sup_norms
from .mesh import (SNAPSHOT_SUFFIX, MeshError, ShapeSpec, interface_polylines,
                   interface_polylines_of, interface_vertex_mask, write_snapshot)
from .optimizer import OptConfig, run_standard, run_variable_metric
from .shape_calculus import DeformationError, dJ_vol, fd_oracle, random_direction

logger = logging.getLogger(__name__)

CSV_HEADER = "iteration,J,t,sigma,grad_norm,accepted"
DERIVATIVE_TOL = 1e-2

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_STEP = 2
EXIT_BAD_DEFORMATION = 3
EXIT_DERIVATIVE_MISMATCH = 4


# --------------------------------------------------------------------------
# configuration


class ConfigFileError(ValueError):
    pass


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text):
    v = float(text)
    if v != int(v):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def parse_shape(text) -> ShapeSpec:
    """``"x y r; x y r"`` (commas also separate numbers); empty means no discs."""
    discs = []
    for part in text.split(";"):
        nums = part.replace(",", " ").replace("(", " ").replace(")", " ").split()
        if not nums:
            continue
        if len(nums) != 3:
            raise ValueError(f"a disc needs 'x y r', got {part.strip()!r}")
        x, y, r = map(float, nums)
        discs.append(((x, y), r))
    return ShapeSpec.from_tuples(discs)


# key -> converter; the OptConfig fields keep their names
_OPT_KEYS = {
    "sigma0": float, "gamma": float, "q": float, "max_iter": _int, "t0": float,
    "max_halvings": _int, "sigma_min": float, "beta_plus": float, "beta_minus": float,
    "f": float, "initial_shape": parse_shape, "target_shape": parse_shape,
    "n_interface": _int, "grid_res": _int, "cg_tol": float, "target_mode": str,
    "area_floor": float, "angle_floor": float, "mesh_motion": str, "slide": _bool,
    "stiffness_exponent": float, "mesh_repair": _bool,
}
_RUN_KEYS = {"method": parse_kind, "algorithm": str, "output_dir": str,
             "snapshot_every": _int, "seed": _int}
KNOWN_KEYS = tuple(sorted({**_OPT_KEYS, **_RUN_KEYS}))


@dataclass
class RunConfig:
    opt: OptConfig = field(default_factory=OptConfig)
    output_dir: Path = Path("output")
    snapshot_every: int = 10
    seed: int = 0
    algorithm: str = "auto"

    @property
    def variable(self):
        if self.algorithm == "auto":
            return self.opt.method.is_rkhs
        return self.algorithm == "variable"


def parse_config(text, base_dir=Path(".")) -> RunConfig:
    """Parse the flat key=value format; errors name the line and key."""
    opt_kw, run_kw, seen = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigFileError(f"line {lineno}: key {key!r} repeated (first on line {seen[key]})")
        seen[key] = lineno
        conv = _OPT_KEYS.get(key) or _RUN_KEYS.get(key)
        if conv is None:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}; "
                                  f"known keys: {', '.join(KNOWN_KEYS)}")
        try:
            val = conv(value)
        except (ValueError, MeshError) as exc:
            raise ConfigFileError(f"line {lineno}: bad value for {key!r}: {exc}") from None
        (opt_kw if key in _OPT_KEYS else run_kw)[key] = val

    kind = run_kw.pop("method", None)
    sigma0 = opt_kw.get("sigma0", OptConfig.sigma0)
    if kind is not None:
        method = GradientMethod(kind, sigma0 if kind.value.startswith("RKHS") else None)
    else:
        method = GradientMethod(OptConfig.method.kind, sigma0)
    try:
        opt = OptConfig(method=method, **opt_kw)
        if opt.initial_shape.discs:
            opt.initial_shape.validate()
        opt.target_shape.validate()
    except (ValueError, MeshError) as exc:
        raise ConfigFileError(f"invalid configuration: {exc}") from None

    algorithm = run_kw.pop("algorithm", "auto").strip().lower()
    if algorithm not in ("auto", "standard", "variable"):
        raise ConfigFileError(f"line {seen['algorithm']}: algorithm must be auto, standard "
                              "or variable")
    if algorithm == "variable" and not opt.method.is_rkhs:
        raise ConfigFileError("the variable metric algorithm needs an RKHS method")
    out = Path(run_kw.pop("output_dir", "output"))
    if not out.is_absolute():
        out = Path(base_dir) / out
    cfg = RunConfig(opt, out, run_kw.pop("snapshot_every", 10), run_kw.pop("seed", 0), algorithm)
    if cfg.snapshot_every < 0:
        raise ConfigFileError("snapshot_every must be >= 0")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config(text, path.parent)


# --------------------------------------------------------------------------
# artifacts


def format_float(x):
    return f"{x:.17g}"


def format_row(row):
    return ",".join([str(row.iteration), format_float(row.J), format_float(row.t),
                     format_float(row.sigma), format_float(row.grad_norm),
                     "1" if row.accepted else "0"])


def _svg_color(frac):
    r, g, b = colorsys.hsv_to_rgb((2.0 / 3.0) * (1.0 - frac), 0.85, 0.8)
    return f"#{int(255 * r):02x}{int(255 * g):02x}{int(255 * b):02x}"


def _svg_path(points, size, pad):
    xy = [(pad + size * x, pad + size * (1.0 - y)) for x, y in points]
    head = "M {:.3f} {:.3f}".format(*xy[0])
    return head + "".join(" L {:.3f} {:.3f}".format(*p) for p in xy[1:]) + " Z"


def shapes_svg(meshes: dict, target: ShapeSpec | None = None, size=500, pad=20) -> str:
    """SVG of the unit square, the dashed target outline and one closed path
    per interface polyline of each mesh in ``meshes`` (iteration -> mesh)."""
    total = size + 2 * pad
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" '
           f'viewBox="0 0 {total} {total}">',
           f'<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" '
           'stroke="black" stroke-width="1"/>']
    if target is not None and target.discs:
        for loop in interface_polylines(target, 200):
            out.append(f'<path class="target" d="{_svg_path(loop, size, pad)}" fill="none" '
                       'stroke="black" stroke-width="1" stroke-dasharray="6 4"/>')
    its = sorted(meshes)
    span = max(its[-1] - its[0], 1) if its else 1
    for n in its:
        color = _svg_color((n - its[0]) / span)
        for loop in interface_polylines_of(meshes[n]):
            pts = meshes[n].vertices[loop]
            out.append(f'<path class="interface" data-iteration="{n}" '
                       f'd="{_svg_path(pts, size, pad)}" fill="none" stroke="{color}" '
                       'stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def snapshot_name(n):
    return f"iter_{n:04d}{SNAPSHOT_SUFFIX}"


# --------------------------------------------------------------------------
# commands


def cmd_run(config_path, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        cfg = load_config(config_path)
    except (ConfigFileError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    odir = cfg.output_dir
    try:
        odir.mkdir(parents=True, exist_ok=True)
        csv = open(odir / "history.csv", "w", encoding="ascii", newline="\n")
    except OSError as exc:
        print(f"error: cannot write to output directory {odir}: {exc.strerror or exc}",
              file=sys.stderr)
        return EXIT_ERROR

    with csv:
        csv.write(CSV_HEADER + "\n")

        def on_row(row):
            csv.write(format_row(row) + "\n")
            csv.flush()

        runner = run_variable_metric if cfg.variable else run_standard
        hist = runner(cfg.opt, on_row=on_row)

    final_it = max(hist.meshes)
    every = cfg.snapshot_every
    selected = {n: m for n, m in hist.meshes.items()
                if n == 0 or n == final_it or (every and n % every == 0)}
    try:
        for n, m in selected.items():
            fields = None
            if n == final_it and hist.final_state is not None:
                st = hist.final_state
                fields = {"u": st.u_h.values, "p": st.p_h.values}
            write_snapshot(m, odir / snapshot_name(n), fields)
        (odir / "shapes.svg").write_text(shapes_svg(selected, cfg.opt.target_shape),
                                         encoding="ascii")
    except OSError as exc:
        print(f"error: cannot write artifacts to {odir}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_ERROR

    print(f"final J={format_float(hist.final_J)} J0={format_float(hist.J0)} "
          f"iterations={hist.rows[-1].iteration} accepted={hist.n_accepted_steps} "
          f"sigma_final={format_float(hist.final_sigma)} status={hist.status}", file=out)
    if cfg.opt.max_iter > 0 and hist.n_accepted_steps == 0:
        return EXIT_NO_STEP
    return EXIT_OK


def cmd_check_derivative(config_path, t, n, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        cfg = load_config(config_path)
    except (ConfigFileError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if not t > 0 or n < 0:
        print("error: need t > 0 and n >= 0", file=sys.stderr)
        return EXIT_ERROR
    problem = cfg.opt.problem()
    mesh = cfg.opt.initial_mesh()
    tensors = problem.tensors(mesh)
    rng = np.random.default_rng(cfg.seed)
    print(f"{'id':>3} {'dJ_vol':>24} {'fd':>24} {'rel_err':>12}", file=out)
    worst = 0.0
    for k in range(n):
        X = random_direction(mesh, rng)
        vol = dJ_vol(tensors, X)
        try:
            fd = fd_oracle(problem, mesh, X, t)
        except DeformationError as exc:
            print(f"error: direction {k}: {exc}", file=sys.stderr)
            return EXIT_BAD_DEFORMATION
        rel = abs(vol - fd) / max(abs(fd), 1e-12)
        worst = max(worst, rel)
        print(f"{k:>3} {vol:>24.16e} {fd:>24.16e} {rel:>12.4e}", file=out)
    return EXIT_OK if worst <= DERIVATIVE_TOL else EXIT_DERIVATIVE_MISMATCH


def parse_sigmas(text):
    vals = [float(s) for s in text.replace(";", ",").split(",") if s.strip()]
    if any(not v > 0 for v in vals):
        raise ValueError("sigmas must be positive")
    return vals


def loglog_slope(x, y):
    """Least-squares slope of log y against log x (nan for fewer than 2 points)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size < 2 or np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def cmd_sigma_sweep(config_path, sigmas_text, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        sigmas = parse_sigmas(sigmas_text)
    except ValueError as exc:
        print(f"error: bad --sigmas: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if not sigmas:
        print("error: --sigmas needs at least one value", file=sys.stderr)
        return EXIT_ERROR
    try:
        cfg = load_config(config_path)
    except (ConfigFileError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    problem = cfg.opt.problem()
    mesh = cfg.opt.initial_mesh()
    tensors = problem.tensors(mesh)
    ys = mesh.vertices[interface_vertex_mask(mesh)]
    if ys.shape[0] == 0:
        ys = mesh.vertices[~mesh.boundary]
    kind = cfg.opt.method.kind.value
    profile = Profile.WENDLAND if kind == "RKHS_WENDLAND" else Profile.GAUSS
    jac, div = [], []
    print(f"{'sigma':>12} {'sup|d_y grad|':>24} {'sup|div grad|':>24}", file=out)
    for s in sigmas:
        j, d = sup_norms(tensors, RadialKernel(profile, s), ys)
        jac.append(j)
        div.append(d)
        print(f"{s:>12.6g} {j:>24.16e} {d:>24.16e}", file=out)
    print(f"slope jacobian={loglog_slope(sigmas, jac):.4f} "
          f"divergence={loglog_slope(sigmas, div):.4f}", file=out)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def build_parser():
    p = _Parser(prog="kernelshape", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="run the configured optimisation")
    r.add_argument("--config", required=True)
    c = sub.add_parser("check-derivative", help="compare dJ_vol with central differences")
    c.add_argument("--config", required=True)
    c.add_argument("--t", type=float, default=1e-4)
    c.add_argument("--n", type=int, default=5)
    s = sub.add_parser("sigma-sweep", help="sup-norms of the RKHS gradient derivatives")
    s.add_argument("--config", required=True)
    s.add_argument("--sigmas", required=True, help="comma separated list")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "check-derivative":
        return cmd_check_derivative(args.config, args.t, args.n)
    return cmd_sigma_sweep(args.config, args.sigmas)


if __name__ == "__main__":
    sys.exit(main())
