from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from dotenv import load_dotenv
import os

load_dotenv()

# Database configuration
DEFAULT_DATABASE_URL = "sqlite:///./stepreg.db"
DATABASE_URL = os.getenv("STEPREG_DATABASE_URL", DEFAULT_DATABASE_URL)
Base = declarative_base()


def _make_engine(url: str):
    if url.startswith("sqlite"):
        return create_engine(url, connect_args={"check_same_thread": False})
    return create_engine(url)


engine = _make_engine(DATABASE_URL)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def configure_database(url: str) -> None:
    """Point the ledger at another database (tests use a temporary SQLite file)"""
    global DATABASE_URL, engine
    DATABASE_URL = url
    engine = _make_engine(url)
    SessionLocal.configure(bind=engine)


# Database session dependency
def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def init_db():
    """Create the ledger tables if they do not exist"""
    import models  # noqa: F401  registers the tables on Base

    Base.metadata.create_all(bind=engine)
