from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
import os
from dotenv import load_dotenv

#load env
load_dotenv()

RUNS_DATABASE_URL = os.getenv("RUNS_DATABASE_URL", "sqlite:///./parareal_runs.db")

Base = declarative_base()

_engines = {}


def get_engine(url: str = None):
    url = url or os.getenv("RUNS_DATABASE_URL", RUNS_DATABASE_URL)
    if url not in _engines:
        connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
        _engines[url] = create_engine(url, connect_args=connect_args)
    return _engines[url]


def get_session(url: str = None):
    """Session bound to the run registry; tables are created on first use."""
    engine = get_engine(url)
    init_db(engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)()


def init_db(engine=None):  #importing models registers their tables
    from . import run_record  # noqa: F401
    Base.metadata.create_all(bind=engine or get_engine())
