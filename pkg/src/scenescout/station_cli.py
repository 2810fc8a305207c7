"""Station command line: live HTTP/TCP service or the simulated mission."""

from __future__ import annotations

import argparse
import logging


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scout-station", description="Base-station service"
    )
    parser.add_argument("--listen", default="127.0.0.1:8000", help="HTTP API address")
    parser.add_argument("--robot", help="TCP bind address for the robot link")
    parser.add_argument("--sim", nargs="?", const="", metavar="SCHEDULE",
                        help="run the full simulated mission in-process")
    parser.add_argument("--oracle", help="annotations.jsonl for the scripted operator")
    parser.add_argument("--store", help="event store path (JSONL)")
    parser.add_argument("--dataset", help="mission dataset directory (sim mode)")
    parser.add_argument("--warmup", type=int, default=40)
    parser.add_argument("--tau", type=float, default=0.75)
    parser.add_argument("--sync-period", type=float, default=30.0)
    parser.add_argument("--report", help="mission report path (sim mode)")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    if args.sim is not None:
        if not args.dataset:
            raise SystemExit("--sim mode needs --dataset")
        from .robot import MissionConfig
        from .sim import SimConfig, run_simulated_mission

        outcome = run_simulated_mission(
            SimConfig(
                mission=MissionConfig(
                    dataset=args.dataset, warmup_count=args.warmup, tau=args.tau
                ),
                schedule_path=args.sim or None,
                oracle_annotations=args.oracle,
                store_path=args.store,
                report_path=args.report,
                sync_period=args.sync_period,
            )
        )
        print(
            f"mission complete: bandwidth_ratio="
            f"{outcome.report['bandwidth_ratio']:.3f}, in_sync={outcome.params_in_sync}"
        )
        return 0

    import uvicorn

    from .server import create_app
    from .station import StationConfig, StationCore
    from .synthetic import bundled_head_and_pool
    from .transport import StationLinkServer, parse_addr

    station_cfg = StationConfig(sync_period=args.sync_period)
    head, base_shots = bundled_head_and_pool(
        station_cfg.backbone, station_cfg.pool_grid
    )
    core = StationCore(head, base_shots, station_cfg, store_path=args.store)
    link = None
    if args.robot:
        link = StationLinkServer(core, args.robot)
        link.start()
        print(f"robot link listening on port {link.bound_port}")
    app = create_app(core)
    host, port = parse_addr(args.listen)
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    finally:
        if link:
            link.stop()
        core.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
