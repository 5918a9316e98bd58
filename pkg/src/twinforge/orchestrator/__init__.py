"""Twin/plant orchestration: protocol, transports, the twin loop and the simulated plant."""
from twinforge.orchestrator.plant import (
    PerturbationSchedule,
    PlantConfig,
    PlantLog,
    ScaleObstacles,
    audit_commands,
    run_plant,
)
from twinforge.orchestrator.protocol import PlantUnreachable, ProtocolError, TwinMessage
from twinforge.orchestrator.session import EpisodeRecord, SessionLog
from twinforge.orchestrator.transport import Link, connect, listen, loopback_pair
from twinforge.orchestrator.twin import (
    CheckpointPolicyStore,
    OrchestratorConfig,
    ScriptedPolicy,
    StubPolicyStore,
    TwinEpisode,
    detect_interrupt,
    orchestrate,
    run_twin_episode,
)

__all__ = [
    "CheckpointPolicyStore",
    "EpisodeRecord",
    "Link",
    "OrchestratorConfig",
    "PerturbationSchedule",
    "PlantConfig",
    "PlantLog",
    "PlantUnreachable",
    "ProtocolError",
    "ScaleObstacles",
    "ScriptedPolicy",
    "SessionLog",
    "StubPolicyStore",
    "TwinEpisode",
    "TwinMessage",
    "audit_commands",
    "connect",
    "detect_interrupt",
    "listen",
    "loopback_pair",
    "orchestrate",
    "run_plant",
    "run_twin_episode",
]
