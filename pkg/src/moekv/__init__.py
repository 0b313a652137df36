"""Expert-sharded, compressed and scheduled KV cache for sparse mixture-of-experts decoding."""

from .compressor import CompressorConfig, fit, decode, encode
from .core import (
    CodecMismatch,
    InsufficientCalibration,
    InvalidArgument,
    InvalidComparison,
    InvalidConfig,
    InvalidEntry,
    KVEntry,
    EntryMeta,
    ModelConfig,
    MoEKVError,
    NotFitted,
    NumericalError,
)
from .costmodel import HardwareProfile, cost_report, mem_total, optimal_shard_size
from .kvstore import KVStore, ShardId, shard_assign
from .pipeline import Engine, EngineConfig, FullCacheOracle, attention, fidelity
from .router import Router, RouterConfig, route
from .scheduler import SchedulerConfig, select_evictions
from .topology import Topology, simulate_fetch
from .trace import TraceSpec, generate_trace, read_trace, write_trace

__version__ = "0.1.0"
