# models/__init__.py
"""
Pydantic models and numerical containers for the robust ACOPF toolkit
"""

# commands/__init__.py
"""
Click commands for the robust ACOPF toolkit
"""

# services/__init__.py
"""
Modelling, solver and validation services for the robust ACOPF toolkit
"""

# utils/__init__.py
"""
Utility functions and helpers for the robust ACOPF toolkit
"""
