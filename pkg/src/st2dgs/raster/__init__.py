from .render import (FragmentList, RenderOutput, RenderSettings, SurfelView,
                     pseudo_normal_map, render)

__all__ = ["FragmentList", "RenderOutput", "RenderSettings", "SurfelView",
           "pseudo_normal_map", "render"]
