"""Runtime nodes: sync scheduler, sensor emulator, central node, application subscriber."""

from .app import AppSubscriber
from .central import CentralConfig, CentralNode
from .sensor import SensorConfig, SensorNode
from .sync import SyncScheduler, Trigger

__all__ = ["AppSubscriber", "CentralConfig", "CentralNode", "SensorConfig", "SensorNode",
           "SyncScheduler", "Trigger"]
