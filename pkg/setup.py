from setuptools import setup, find_packages

setup(
    name='fixedpoint_tools',
    version='0.1.0',
    packages=find_packages(exclude=["tests"]),
    include_package_data=True,
    package_data={"fixedpoint_tools": ["schemas/*.json"]},
    install_requires=[
        "click",
        "joblib",
        "networkx",
        "numpy",
        "python-rapidjson",
        "pyyaml",
        "tenacity",
        "tqdm",
    ],
    entry_points="""
        [console_scripts]
        fixedpoint-tools=fixedpoint_tools.cli:main
    """,
)
