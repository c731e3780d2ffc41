"""Lightweight workflow provenance capture for resource-constrained clients.

The package is organized in layers:

* ``wire``      -- binary record codec, envelopes, compression, grouping
* ``model``     -- provenance domain records, graph assembly, validation, export
* ``frames``    -- datagram frame codec for the pub/sub transport
* ``qos2``      -- exactly-once handshake state machines
* ``session``   -- client session (connect / register / publish / subscribe)
* ``broker``    -- pub/sub broker state machine
* ``link``      -- deterministic link emulator (loss, dup, reorder, bandwidth)
* ``net``       -- in-process simulated network (virtual time) and UDP shell
* ``capture``   -- user-facing instrumentation API (workflow / task / data)
* ``translator``-- server-side graph reconstruction, persistence, queries
* ``workload``  -- synthetic workload generator
* ``bench``     -- overhead harness, sweeps, CSV reports
* ``cli``       -- command line entry points
"""

from provlight.wire import (
    CaptureRecord,
    DataPayload,
    RecordKind,
    decode_record,
    encode_record,
    open_envelope,
    seal_envelope,
)
from provlight.model import ProvGraph, apply_record, export_prov, validate_graph
from provlight.capture import CaptureConfig, task_begin, task_end, workflow_begin, workflow_end

__all__ = [
    "CaptureRecord",
    "DataPayload",
    "RecordKind",
    "encode_record",
    "decode_record",
    "seal_envelope",
    "open_envelope",
    "ProvGraph",
    "apply_record",
    "validate_graph",
    "export_prov",
    "CaptureConfig",
    "workflow_begin",
    "task_begin",
    "task_end",
    "workflow_end",
]

__version__ = "0.1.0"
