#!/usr/bin/env python3
"""
Command-line front end of the SMC ConvNet simulator.

Usage:
    python cli.py [global options] <command> [command options]

Commands:
    analyze       Shapes, MAC counts and storage of a network
    tile-search   Pick 4D-tile sizes for every CONV/FC layer
    ratio-sweep   OI and estimated cycles of one layer over (T_Ci, T_Co) pairs
    calibrate     Measure cluster efficiency for a schedule's buckets
    simulate      Simulate a full inference pass (time, power, training estimate)
    roofline      Roofline curve with simulated networks placed on it
    bf-sweep      Banking-factor study over kernel classes
    mesh          Stream camera frames through a mesh of cubes

Global options:
    --config NAME|PATH   Hardware profile (default: HARDWARE_PROFILE)
    --out PATH           Output file ('-' or omitted: stdout)
    --format FMT         json, csv or table (default: table)
    --jobs N             Parallel processes for tile search

Exit codes:
    0 success, 1 user error, 2 infeasible constraints, 3 internal error

Examples:
    python cli.py analyze vgg19
    python cli.py --format json --out out/gnet.schedule.json tile-search googlenet
    python cli.py --format csv simulate resnet50 --out out/resnet50.csv
    python cli.py ratio-sweep vgg19 conv3_1 --tile 16 16
    python cli.py bf-sweep --plot out/bf.png
    python cli.py mesh configs/mesh-resnet152-8m.json
"""

import argparse
import json
import os
import shlex
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from clustersim import DEFAULT_SWEEP_FACTORS, DEFAULT_SWEEP_KERNELS, EfficiencyTable, bf_sweep, calibrate
from config import get_config
from error_handling import EXIT_OK, EXIT_USER_ERROR, UserInputError, handle_cli_error, log_info
from hardware import HardwareProfile, load_hardware_profile
from meshsim import load_mesh_config, simulate_stream
from model import load_network, mac_count, resize_input, storage_report
from report_io import FORMATS, RunManifest, render, render_csv, sidecar_path, write_text
from smcsim import (COMPONENTS, energy_report, evaluate_network, placement_comparison, ridge_point,
                    roofline, simulate_network, training_estimate)
from tiling import Schedule, layer_ratio_sweep, schedule_overheads, search_tiles

MIB = float(1 << 20)

EXAMPLES = """Examples:
  python cli.py analyze vgg19
  python cli.py --format json --out out/googlenet.json tile-search googlenet --schedule-out out/googlenet.schedule.json
  python cli.py --format csv --out out/resnet50.csv simulate resnet50
  python cli.py ratio-sweep vgg19 conv3_1 --tile 16 16
  python cli.py bf-sweep --plot out/bf.png
  python cli.py mesh configs/mesh-resnet152-8m.json
"""


class CliContext:
    """Resolved global options shared by every command."""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.config = get_config()
        self.fmt = args.format
        self.out = args.out
        self.jobs = args.jobs if args.jobs is not None else self.config.SEARCH_JOBS
        if self.jobs < 1:
            raise UserInputError("--jobs must be at least 1")
        self.profile_ref = args.config or self.config.HARDWARE_PROFILE
        self.command_line = ' '.join(shlex.quote(a) for a in argv)
        self._profile: Optional[HardwareProfile] = None

    @property
    def profile(self) -> HardwareProfile:
        if self._profile is None:
            self._profile = load_hardware_profile(self.profile_ref, self.config)
        return self._profile

    @property
    def profile_path(self) -> str:
        return self.config.profile_path(self.profile_ref)

    def network_path(self, ref: str) -> str:
        """A descriptor path, or a name looked up in NETWORKS_DIR."""
        if os.path.isfile(ref) or ref.endswith('.json') or os.sep in ref:
            return ref
        return os.path.join(self.config.NETWORKS_DIR, f"{ref}.json")

    def manifest(self, inputs: Sequence[str] = (), configs: Sequence[str] = ()) -> RunManifest:
        return RunManifest.create(self.command_line, inputs=inputs,
                                  configs=[self.profile_path] + list(configs), config_class=self.config)

    def emit(self, payload: Dict, rows: List[Dict], manifest: RunManifest,
             columns: Optional[Sequence[str]] = None, title: str = ''):
        write_text(render(self.fmt, payload, rows, manifest, columns, title), self.out)

    def sidecar(self, suffix: str, rows: List[Dict], manifest: RunManifest):
        """Extra CSV next to a file output (breakdowns, timelines)."""
        path = sidecar_path(self.out, suffix)
        if path is not None:
            write_text(render_csv(rows, manifest), path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_analyze(ctx: CliContext) -> int:
    path = ctx.network_path(ctx.args.network)
    net = load_network(path)
    macs = mac_count(net)
    storage = storage_report(net)

    rows = []
    for layer in net.layers:
        activation = storage.activation_bytes.get(layer.id, 0)
        rows.append({
            'layer': layer.id,
            'kind': layer.kind.value,
            'in_shape': str(layer.in_shape),
            'out_shape': str(layer.out_shape),
            'macs': macs.per_layer.get(layer.id, 0),
            'non_mac_ops': macs.non_mac_ops.get(layer.id, 0),
            'activation_bytes': activation,
            'activation_mib': activation / MIB,
            'coefficient_bytes': layer.coefficient_count * layer.element_bytes,
        })
    rows.append({
        'layer': 'TOTAL', 'kind': '', 'in_shape': str(net.input_shape), 'out_shape': str(net.sink.out_shape),
        'macs': macs.total, 'non_mac_ops': macs.non_mac_total,
        'activation_bytes': storage.largest_layer_bytes, 'activation_mib': storage.largest_layer_bytes / MIB,
        'coefficient_bytes': storage.coefficient_bytes,
    })
    payload = {'network': net.name, 'macs': macs.to_dict(), 'storage': storage.to_dict(), 'layers': rows[:-1]}
    title = (f"{net.name}: {macs.gmac:.3f} GMAC, storage {storage.total_bytes / MIB:.1f} MiB "
             f"(training {storage.training_total_bytes / MIB:.1f} MiB)")
    ctx.emit(payload, rows, ctx.manifest([path]), title=title)
    return EXIT_OK


def _schedule_rows(schedule: Schedule) -> List[Dict]:
    rows = []
    for entry in schedule.layers.values():
        x, y, ci, co = entry.dims
        rows.append({
            'layer': entry.layer_id, 'kind': entry.kind,
            't_x': x, 't_y': y, 't_ci': ci, 't_co': co,
            'tiles': int(np.prod(entry.counts)),
            'footprint_bytes': entry.cost.footprint_bytes,
            'oi_flop_per_byte': entry.cost.oi,
            'est_cycles': entry.cost.est_cycles,
            'bucket': entry.bucket,
        })
    return rows


def cmd_tile_search(ctx: CliContext) -> int:
    path = ctx.network_path(ctx.args.network)
    net = load_network(path)
    schedule = search_tiles(net, ctx.profile, spm_bytes=ctx.args.spm_bytes, jobs=ctx.jobs)
    overheads = schedule_overheads(net, schedule)
    if ctx.args.schedule_out:
        schedule.save(ctx.args.schedule_out)
        log_info(f"Schedule written to {ctx.args.schedule_out}", 'tile-search')

    payload = {'schedule': schedule.to_dict(), 'overheads': overheads.to_dict(),
               'est_cycles': schedule.est_cycles}
    title = (f"{net.name}: {len(schedule.layers)} tiled layers, storage overhead "
             f"{overheads.storage_overhead:.2%}, halo read overhead {overheads.halo_read_overhead:.2%}, "
             f"write/read {overheads.write_read_ratio:.2%}")
    ctx.emit(payload, _schedule_rows(schedule), ctx.manifest([path]), title=title)
    return EXIT_OK


def cmd_ratio_sweep(ctx: CliContext) -> int:
    args = ctx.args
    path = ctx.network_path(args.network)
    net = load_network(path)
    try:
        layer = net.layer(args.layer)
    except KeyError:
        raise UserInputError(f"Network '{net.name}' has no layer '{args.layer}'")
    if not layer.is_weighted:
        raise UserInputError(f"Layer '{layer.id}' ({layer.kind.value}) has no channel tiling")
    t_x, t_y = args.tile or (layer.in_shape.x, layer.in_shape.y)
    rows = layer_ratio_sweep(layer, ctx.profile, t_x, t_y)
    feasible = [r for r in rows if r['feasible']]
    best = min(feasible, key=lambda r: r['est_cycles']) if feasible else None
    payload = {'layer': layer.id, 't_x': t_x, 't_y': t_y, 'best': best, 'rows': rows}
    title = f"{net.name}/{layer.id}: T_Xi={t_x} T_Yi={t_y}, {len(feasible)} of {len(rows)} pairs fit the SPM"
    ctx.emit(payload, rows, ctx.manifest([path]), title=title)
    return EXIT_OK


def _schedule_for(ctx: CliContext, net) -> Schedule:
    if ctx.args.schedule:
        return Schedule.load(ctx.args.schedule)
    return search_tiles(net, ctx.profile, jobs=ctx.jobs)


def cmd_calibrate(ctx: CliContext) -> int:
    path = ctx.network_path(ctx.args.network)
    net = load_network(path)
    schedule = _schedule_for(ctx, net)
    table = calibrate(ctx.profile, net, schedule, window=ctx.args.window)
    if ctx.args.table_out:
        table.save(ctx.args.table_out)
        log_info(f"Efficiency table written to {ctx.args.table_out}", 'calibrate')

    rows = [{'bucket': key, **entry.to_dict()} for key, entry in sorted(table.entries.items())]
    for row in rows:
        row['dims'] = 'x'.join(str(d) for d in row['dims'])
    inputs = [path] + ([ctx.args.schedule] if ctx.args.schedule else [])
    ctx.emit(table.to_dict(), rows, ctx.manifest(inputs), title=f"{net.name}: {len(rows)} efficiency buckets")
    return EXIT_OK


def cmd_simulate(ctx: CliContext) -> int:
    args = ctx.args
    path = ctx.network_path(args.network)
    net = load_network(path)
    if args.input_size:
        net = resize_input(net, args.input_size)
    profile = ctx.profile
    schedule = _schedule_for(ctx, net)
    if args.table and not args.calibrate:
        table = EfficiencyTable.load(args.table)
        report = simulate_network(net, schedule, profile, table)
    else:
        _, table, report = evaluate_network(net, profile, window=args.window, schedule=schedule)
        if args.table:
            table.save(args.table)
            log_info(f"Efficiency table written to {args.table}", 'simulate')

    energy = energy_report(report, profile, args.placement)
    training = {preset: training_estimate(report, profile.training_factors(preset), preset).to_dict()
                for preset in sorted(profile.training)}
    payload = {
        'report': report.to_dict(),
        'energy': energy.to_dict(),
        'placement_comparison': placement_comparison(report, profile),
        'training': training,
        'roofline_gflops': roofline(profile, report.oi),
        'layers': [row.to_dict() for row in report.layers],
    }
    summary = [{
        'network': report.network, 'input': report.input_shape, 'gmac': report.macs / 1e9,
        'cycles': report.cycles, 'fps': report.fps, 'gflops': report.gflops, 'pef': report.pef,
        **{f"{c}_cycles": report.breakdown[c] for c in COMPONENTS},
        'pe_share': report.pe_share, 'power_w': energy.power_w, 'gflops_per_w': energy.gflops_per_w,
    }]
    inputs = [path] + [p for p in (args.schedule, None if args.calibrate else args.table) if p]
    manifest = ctx.manifest(inputs)
    ctx.emit(payload, summary, manifest, title=f"{report.network} on {profile.name}")
    ctx.sidecar('breakdown', [row.to_dict() for row in report.layers], manifest)
    if args.plot:
        from plots import breakdown_plot
        breakdown_plot([report], args.plot)
    return EXIT_OK


def cmd_roofline(ctx: CliContext) -> int:
    args = ctx.args
    profile = ctx.profile
    ridge = ridge_point(profile)
    rows = []
    for oi in np.logspace(np.log10(ridge) - 2, np.log10(ridge) + 2, args.points):
        bound = roofline(profile, float(oi))
        rows.append({'network': '', 'oi_flop_per_byte': float(oi), 'gflops': bound,
                     'roof_gflops': bound, 'roof_fraction': 1.0})
    reports = []
    paths = []
    for ref in args.networks:
        path = ctx.network_path(ref)
        paths.append(path)
        net = load_network(path)
        if args.input_size:
            net = resize_input(net, args.input_size)
        _, _, report = evaluate_network(net, profile, jobs=ctx.jobs, window=args.window)
        reports.append(report)
        bound = roofline(profile, report.oi)
        rows.append({'network': report.network, 'oi_flop_per_byte': report.oi, 'gflops': report.gflops,
                     'roof_gflops': bound, 'roof_fraction': report.gflops / bound})

    payload = {'peak_gflops': profile.smc.peak_gflops,
               'dram_bandwidth_gbps': profile.smc.dram.internal_bandwidth_gbps,
               'ridge_flop_per_byte': ridge, 'rows': rows}
    ctx.emit(payload, rows, ctx.manifest(paths), title=f"Roofline of {profile.name}")
    if args.plot:
        from plots import roofline_plot
        roofline_plot(profile, reports, args.plot)
    return EXIT_OK


def cmd_bf_sweep(ctx: CliContext) -> int:
    args = ctx.args
    rows = bf_sweep(ctx.profile, kernels=args.kernels, factors=args.factors, window=args.window)
    payload = {'rows': rows}
    ctx.emit(payload, rows, ctx.manifest(), title='Banking-factor sweep (mean PEF)')
    if args.plot:
        from plots import bf_sweep_plot
        bf_sweep_plot(rows, args.plot)
    return EXIT_OK


def cmd_mesh(ctx: CliContext) -> int:
    args = ctx.args
    mesh = load_mesh_config(args.scenario)
    if ctx.args.config is None:
        ctx.profile_ref = mesh.hardware_profile
    profile = ctx.profile
    path = ctx.network_path(mesh.network)
    net = load_network(path)
    if (net.input_shape.x, net.input_shape.y) != (mesh.frame_x, mesh.frame_y):
        net = resize_input(net, mesh.frame_x, mesh.frame_y)
    _, _, report = evaluate_network(net, profile, jobs=ctx.jobs, window=args.window)
    result = simulate_stream(mesh, report, profile, duration_s=args.duration)

    summary = [{
        'scenario': result.scenario, 'cubes': len(result.cubes), 'throughput_gflops': result.throughput_gflops,
        'power_w': result.power_w, 'gflops_per_w': result.gflops_per_w,
        'frames_completed': sum(c.frames_done for c in result.cubes), 'backlog': result.backlog,
    }]
    manifest = ctx.manifest([path], [args.scenario])
    if ctx.fmt == 'csv':
        ctx.emit(result.to_dict(), result.link_rows(), manifest)
    else:
        ctx.emit(result.to_dict(), summary, manifest, title=f"Mesh {result.scenario}")
    ctx.sidecar('timeline', result.timeline_rows(), manifest)
    return EXIT_OK


COMMANDS = {
    'analyze': cmd_analyze,
    'tile-search': cmd_tile_search,
    'ratio-sweep': cmd_ratio_sweep,
    'calibrate': cmd_calibrate,
    'simulate': cmd_simulate,
    'roofline': cmd_roofline,
    'bf-sweep': cmd_bf_sweep,
    'mesh': cmd_mesh,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _global_options(parser: argparse.ArgumentParser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument('--config', default=default, help='Hardware profile name or JSON path')
    parser.add_argument('--out', default=default, help="Output file ('-' for stdout)")
    parser.add_argument('--format', choices=FORMATS, default=argparse.SUPPRESS if suppress else 'table',
                        help='Output format')
    parser.add_argument('--jobs', type=int, default=default, help='Parallel processes for tile search')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='cli.py',
        description='Performance, energy and functional simulator for ConvNets on Smart Memory Cubes',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EXAMPLES,
    )
    _global_options(parser, suppress=False)

    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    window = argparse.ArgumentParser(add_help=False)
    window.add_argument('--window', type=int, default=get_config().CA_WINDOW_CYCLES,
                        help='Cycle window of cluster simulations')

    sub = parser.add_subparsers(dest='command', required=True, metavar='command')

    p = sub.add_parser('analyze', parents=[common], help='Shapes, MACs and storage of a network')
    p.add_argument('network', help='Descriptor path or name in NETWORKS_DIR')

    p = sub.add_parser('tile-search', parents=[common], help='Choose tile sizes per layer')
    p.add_argument('network')
    p.add_argument('--spm-bytes', type=int, default=None, help='Override the SPM capacity')
    p.add_argument('--schedule-out', default=None, help='Write the schedule JSON here')

    p = sub.add_parser('ratio-sweep', parents=[common], help='OI and cycles over (T_Ci, T_Co) of one layer')
    p.add_argument('network')
    p.add_argument('layer', help='CONV/FC layer id')
    p.add_argument('--tile', type=int, nargs=2, metavar=('T_XI', 'T_YI'), default=None,
                   help='Spatial input tile (default: the full input)')

    p = sub.add_parser('calibrate', parents=[common, window], help='Measure bucket efficiencies')
    p.add_argument('network')
    p.add_argument('--schedule', default=None, help='Schedule JSON (searched when omitted)')
    p.add_argument('--table-out', default=None, help='Write the efficiency table JSON here')

    p = sub.add_parser('simulate', parents=[common, window], help='Simulate one inference pass')
    p.add_argument('network')
    p.add_argument('--schedule', default=None, help='Schedule JSON (searched when omitted)')
    p.add_argument('--table', default=None, help='Efficiency table JSON (calibrated when omitted)')
    p.add_argument('--calibrate', action='store_true',
                   help='Calibrate even when --table is given, and write the fresh table there')
    p.add_argument('--placement', choices=('in-cube', 'host-side'), default='in-cube')
    p.add_argument('--input-size', type=int, default=None, help='Resize the input to N x N first')
    p.add_argument('--plot', default=None, help='Write a time-breakdown plot')

    p = sub.add_parser('roofline', parents=[common, window], help='Roofline curve and simulated points')
    p.add_argument('networks', nargs='*', help='Networks to place on the roofline')
    p.add_argument('--points', type=int, default=41, help='Curve points')
    p.add_argument('--input-size', type=int, default=None)
    p.add_argument('--plot', default=None, help='Write a roofline plot')

    p = sub.add_parser('bf-sweep', parents=[common, window], help='Banking-factor study')
    p.add_argument('--kernels', type=int, nargs='+', default=list(DEFAULT_SWEEP_KERNELS))
    p.add_argument('--factors', type=float, nargs='+', default=list(DEFAULT_SWEEP_FACTORS))
    p.add_argument('--plot', default=None, help='Write a PEF versus BF plot')

    p = sub.add_parser('mesh', parents=[common, window], help='Stream frames through a mesh of cubes')
    p.add_argument('scenario', help='Mesh scenario JSON')
    p.add_argument('--duration', type=float, default=None, help='Override the simulated seconds')

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USER_ERROR

    try:
        ctx = CliContext(args, argv)
        return COMMANDS[args.command](ctx)
    except Exception as e:
        response, code = handle_cli_error(e, f"cli.{args.command}")
        sys.stderr.write(json.dumps(response) + '\n')
        return code


if __name__ == '__main__':
    sys.exit(main())
