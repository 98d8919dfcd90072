from .analysis_service import AnalysisService
from .joint_service import JointEngine
from .model_service import ModelService
from .simulation_service import SimulationService

__all__ = ['AnalysisService', 'JointEngine', 'ModelService', 'SimulationService']
