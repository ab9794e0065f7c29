from .base import Attachment, PerceptionClient, PerceptionRequest, PerceptionResponse
from .oracle import BehaviorTruth, CorruptionSpec, OracleClient, PoseTruth, ScriptedClient, UnavailableClient

__all__ = [
    "Attachment",
    "BehaviorTruth",
    "CorruptionSpec",
    "OracleClient",
    "PerceptionClient",
    "PerceptionRequest",
    "PerceptionResponse",
    "PoseTruth",
    "ScriptedClient",
    "UnavailableClient",
]
