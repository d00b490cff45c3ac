"""Configuration, experiment pipelines, aggregation and the CLI."""
from mprlab.harness.aggregate import ExperimentReport, aggregate, summarize
from mprlab.harness.config import RunConfig, component_seed, load_config
from mprlab.harness.experiments import Workspace

__all__ = ["ExperimentReport", "RunConfig", "Workspace", "aggregate", "component_seed",
           "load_config", "summarize"]
