"""Run a twin/plant session inside one process, over queues or a local socket."""
from __future__ import annotations

import threading
from dataclasses import dataclass

from twinforge.env import DEFAULT_START_Q, EnvConfig
from twinforge.kinematics import ArmModel, reference_arm
from twinforge.orchestrator.plant import PerturbationSchedule, PlantConfig, PlantLog, run_plant
from twinforge.orchestrator.session import SessionLog
from twinforge.orchestrator.transport import Link, accept, connect, listen, loopback_pair
from twinforge.orchestrator.twin import OrchestratorConfig, PolicyStore, orchestrate
from twinforge.world import Scene


@dataclass
class SessionResult:
    session: SessionLog
    plant: PlantLog


def run_session(
    store: PolicyStore,
    true_scene: Scene,
    schedule: PerturbationSchedule,
    plant_config: PlantConfig | None = None,
    orch_config: OrchestratorConfig | None = None,
    mode: str = "loopback",
    model: ArmModel | None = None,
    start_q=DEFAULT_START_Q,
    timeout: float | None = 600.0,
) -> SessionResult:
    """Plant in a background thread, twin in the caller's thread."""
    model = model or reference_arm()
    pcfg = plant_config or PlantConfig()
    env_config: EnvConfig = pcfg.env
    holder: dict = {}

    if mode == "loopback":
        twin_end, plant_end = loopback_pair()

        def plant_main():
            holder["plant"] = run_plant(Link(plant_end, timeout), model, true_scene, schedule, pcfg)

        worker = threading.Thread(target=plant_main, daemon=True)
        worker.start()
        twin_link = Link(twin_end, timeout)
    elif mode == "socket":
        server = listen("127.0.0.1:0")
        port = server.getsockname()[1]

        def plant_main():
            try:
                chan = accept(server, timeout)
            finally:
                server.close()
            try:
                holder["plant"] = run_plant(Link(chan, timeout), model, true_scene, schedule, pcfg)
            finally:
                chan.close()

        worker = threading.Thread(target=plant_main, daemon=True)
        worker.start()
        twin_link = Link(connect(f"127.0.0.1:{port}"), timeout)
    else:
        raise ValueError(f"unknown transport mode {mode!r}")
    try:
        slog = orchestrate(twin_link, store, orch_config, model, env_config, start_q)
    finally:
        worker.join(timeout)
        twin_link.close()
    return SessionResult(slog, holder.get("plant", PlantLog(end_reason="plant did not finish")))
